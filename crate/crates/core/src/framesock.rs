//! Minimal WebSocket (RFC 6455) server and client for relaying camera frames.
//!
//! The codec half is I/O free: [`accept_key`], [`parse_upgrade_request`],
//! [`encode_frame`], [`decode_frame`] and [`MessageAssembler`]. The blocking
//! half wraps it around `std::net` sockets: [`WsStream`] for clients and
//! [`FrameServer`] for the relay, where `/publish` connections feed every
//! `/observe` connection.
//!
//! Not supported: TLS, extensions (permessage-deflate), subprotocols.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::RngCore;
use sha1::{Digest, Sha1};
use sha2::Sha256;

use crate::companion::{FrameSink, NotConnected};
use crate::wire::{encode_frame_packet, FramePacket, FRAME_HEADER_LEN, FRAME_MAX_PAYLOAD};

const WS_GUID: &str = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
const MAX_REQUEST_BYTES: usize = 8192;
/// Largest reassembled message: one full frame packet.
pub const MAX_MESSAGE: usize = FRAME_HEADER_LEN + FRAME_MAX_PAYLOAD;
pub const MAX_FRAGMENTS: usize = 16;

pub const CLOSE_NORMAL: u16 = 1000;
pub const CLOSE_PROTOCOL_ERROR: u16 = 1002;
pub const CLOSE_TOO_BIG: u16 = 1009;

#[derive(Debug, thiserror::Error)]
pub enum WsError {
    #[error("bad Sec-WebSocket-Key")]
    BadKey,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(&'static str),
    #[error("message exceeds {MAX_MESSAGE} bytes")]
    MessageTooBig,
    #[error("connection closed (status {0:?})")]
    ConnectionClosed(Option<u16>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WsError {
    /// Close status to send when this error ends a connection.
    pub fn close_code(&self) -> Option<u16> {
        match self {
            WsError::ProtocolViolation(_) => Some(CLOSE_PROTOCOL_ERROR),
            WsError::MessageTooBig => Some(CLOSE_TOO_BIG),
            _ => None,
        }
    }
}

/// `Sec-WebSocket-Accept` for a client key.
pub fn accept_key(client_key: &str) -> Result<String, WsError> {
    if client_key.len() != 24 {
        return Err(WsError::BadKey);
    }
    match BASE64.decode(client_key) {
        Ok(raw) if raw.len() == 16 => {}
        _ => return Err(WsError::BadKey),
    }
    let mut h = Sha1::new();
    h.update(client_key.as_bytes());
    h.update(WS_GUID.as_bytes());
    Ok(BASE64.encode(h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnRole {
    Publisher,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpgradeRequest {
    pub path: String,
    pub key: String,
    pub role: ConnRole,
}

fn role_for(target: &str) -> Option<ConnRole> {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    for pair in query.split('&') {
        match pair {
            "role=observer" => return Some(ConnRole::Observer),
            "role=publisher" => return Some(ConnRole::Publisher),
            _ => {}
        }
    }
    match path {
        "/publish" => Some(ConnRole::Publisher),
        "/observe" => Some(ConnRole::Observer),
        _ => None,
    }
}

fn header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

/// Parses an HTTP/1.1 upgrade request. `Ok(None)` means the header block is
/// not complete yet; the second tuple field is the header length.
pub fn parse_upgrade_request(buf: &[u8]) -> Result<Option<(UpgradeRequest, usize)>, WsError> {
    let Some(end) = header_end(buf) else {
        if buf.len() > MAX_REQUEST_BYTES
            || (!buf.is_empty() && !b"GET ".starts_with(&buf[..buf.len().min(4)]))
        {
            return Err(WsError::Handshake("not an HTTP GET request".into()));
        }
        return Ok(None);
    };
    let text = std::str::from_utf8(&buf[..end])
        .map_err(|_| WsError::Handshake("request is not UTF-8".into()))?;
    let mut lines = text.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split(' ');
    let (method, target, version) = (parts.next(), parts.next(), parts.next());
    if method != Some("GET") || version != Some("HTTP/1.1") {
        return Err(WsError::Handshake(format!(
            "bad request line {request_line:?}"
        )));
    }
    let target = target.unwrap_or_default();
    let mut headers: BTreeMap<String, String> = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| WsError::Handshake(format!("bad header line {line:?}")))?;
        headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    let header = |n: &str| headers.get(n).map(String::as_str).unwrap_or("");
    if !header("upgrade").eq_ignore_ascii_case("websocket") {
        return Err(WsError::Handshake("missing Upgrade: websocket".into()));
    }
    if !header("connection")
        .split(',')
        .any(|t| t.trim().eq_ignore_ascii_case("upgrade"))
    {
        return Err(WsError::Handshake("missing Connection: Upgrade".into()));
    }
    if header("sec-websocket-version") != "13" {
        return Err(WsError::Handshake(
            "unsupported Sec-WebSocket-Version".into(),
        ));
    }
    let key = header("sec-websocket-key").to_string();
    accept_key(&key)?;
    let role =
        role_for(target).ok_or_else(|| WsError::Handshake(format!("unknown path {target:?}")))?;
    Ok(Some((
        UpgradeRequest {
            path: target.to_string(),
            key,
            role,
        },
        end,
    )))
}

pub fn upgrade_response(client_key: &str) -> Result<String, WsError> {
    Ok(format!(
        "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: {}\r\n\r\n",
        accept_key(client_key)?
    ))
}

pub fn client_request(host: &str, path: &str, key: &str) -> String {
    format!(
        "GET {path} HTTP/1.1\r\nHost: {host}\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    Continuation = 0x0,
    Text = 0x1,
    Binary = 0x2,
    Close = 0x8,
    Ping = 0x9,
    Pong = 0xA,
}

impl Opcode {
    fn from_bits(b: u8) -> Option<Opcode> {
        Some(match b {
            0x0 => Opcode::Continuation,
            0x1 => Opcode::Text,
            0x2 => Opcode::Binary,
            0x8 => Opcode::Close,
            0x9 => Opcode::Ping,
            0xA => Opcode::Pong,
            _ => return None,
        })
    }

    pub fn is_control(self) -> bool {
        (self as u8) & 0x8 != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub fin: bool,
    pub opcode: Opcode,
    pub payload: Vec<u8>,
}

/// Which side of the connection is decoding; fixes the masking rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Receives client frames, which must be masked.
    Server,
    /// Receives server frames, which must not be masked.
    Client,
}

/// Serializes one frame. `mask` must be `Some` for client-to-server frames.
pub fn encode_frame(fin: bool, opcode: Opcode, payload: &[u8], mask: Option<[u8; 4]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 14);
    out.push(if fin { 0x80 } else { 0 } | opcode as u8);
    let mask_bit = if mask.is_some() { 0x80 } else { 0 };
    match payload.len() {
        n if n < 126 => out.push(mask_bit | n as u8),
        n if n <= u16::MAX as usize => {
            out.push(mask_bit | 126);
            out.extend_from_slice(&(n as u16).to_be_bytes());
        }
        n => {
            out.push(mask_bit | 127);
            out.extend_from_slice(&(n as u64).to_be_bytes());
        }
    }
    match mask {
        Some(key) => {
            out.extend_from_slice(&key);
            out.extend(payload.iter().enumerate().map(|(i, b)| b ^ key[i % 4]));
        }
        None => out.extend_from_slice(payload),
    }
    out
}

/// Decodes the first frame in `buf`. `Ok(None)` means more bytes are needed.
pub fn decode_frame(buf: &[u8], side: Side) -> Result<Option<(Frame, usize)>, WsError> {
    if buf.len() < 2 {
        return Ok(None);
    }
    let (b0, b1) = (buf[0], buf[1]);
    if b0 & 0x70 != 0 {
        return Err(WsError::ProtocolViolation("reserved bits set"));
    }
    let opcode =
        Opcode::from_bits(b0 & 0x0F).ok_or(WsError::ProtocolViolation("unknown opcode"))?;
    let fin = b0 & 0x80 != 0;
    let masked = b1 & 0x80 != 0;
    match (side, masked) {
        (Side::Server, false) => return Err(WsError::ProtocolViolation("unmasked client frame")),
        (Side::Client, true) => return Err(WsError::ProtocolViolation("masked server frame")),
        _ => {}
    }
    let mut pos = 2;
    let len = match b1 & 0x7F {
        126 => {
            if buf.len() < 4 {
                return Ok(None);
            }
            pos = 4;
            u16::from_be_bytes([buf[2], buf[3]]) as u64
        }
        127 => {
            if buf.len() < 10 {
                return Ok(None);
            }
            pos = 10;
            let n = u64::from_be_bytes(buf[2..10].try_into().unwrap());
            if n >> 63 != 0 {
                return Err(WsError::ProtocolViolation("length high bit set"));
            }
            n
        }
        n => n as u64,
    };
    if opcode.is_control() {
        if !fin {
            return Err(WsError::ProtocolViolation("fragmented control frame"));
        }
        if len > 125 {
            return Err(WsError::ProtocolViolation(
                "control frame payload over 125 bytes",
            ));
        }
    }
    if len > MAX_MESSAGE as u64 {
        return Err(WsError::MessageTooBig);
    }
    let len = len as usize;
    let key = if masked {
        if buf.len() < pos + 4 {
            return Ok(None);
        }
        let k: [u8; 4] = buf[pos..pos + 4].try_into().unwrap();
        pos += 4;
        Some(k)
    } else {
        None
    };
    if buf.len() < pos + len {
        return Ok(None);
    }
    let mut payload = buf[pos..pos + len].to_vec();
    if let Some(k) = key {
        for (i, b) in payload.iter_mut().enumerate() {
            *b ^= k[i % 4];
        }
    }
    Ok(Some((
        Frame {
            fin,
            opcode,
            payload,
        },
        pos + len,
    )))
}

/// A complete application-level event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Text(String),
    Binary(Vec<u8>),
    Ping(Vec<u8>),
    Pong(Vec<u8>),
    Close(Option<u16>),
}

/// Reassembles fragmented data messages (at most [`MAX_FRAGMENTS`] frames).
/// Control frames pass straight through, even between fragments.
#[derive(Debug, Default)]
pub struct MessageAssembler {
    partial: Option<(Opcode, Vec<u8>, usize)>,
}

impl MessageAssembler {
    pub fn push(&mut self, frame: Frame) -> Result<Option<Message>, WsError> {
        match frame.opcode {
            Opcode::Ping => return Ok(Some(Message::Ping(frame.payload))),
            Opcode::Pong => return Ok(Some(Message::Pong(frame.payload))),
            Opcode::Close => {
                let code = match frame.payload.len() {
                    0 => None,
                    1 => return Err(WsError::ProtocolViolation("one-byte close payload")),
                    _ => Some(u16::from_be_bytes([frame.payload[0], frame.payload[1]])),
                };
                return Ok(Some(Message::Close(code)));
            }
            Opcode::Text | Opcode::Binary => {
                if self.partial.is_some() {
                    return Err(WsError::ProtocolViolation(
                        "new data frame inside fragmented message",
                    ));
                }
                if frame.fin {
                    return finish(frame.opcode, frame.payload).map(Some);
                }
                self.partial = Some((frame.opcode, frame.payload, 1));
            }
            Opcode::Continuation => {
                let Some((op, buf, count)) = self.partial.as_mut() else {
                    return Err(WsError::ProtocolViolation(
                        "continuation without a started message",
                    ));
                };
                *count += 1;
                if *count > MAX_FRAGMENTS {
                    return Err(WsError::ProtocolViolation("too many fragments"));
                }
                if buf.len() + frame.payload.len() > MAX_MESSAGE {
                    return Err(WsError::MessageTooBig);
                }
                buf.extend_from_slice(&frame.payload);
                if frame.fin {
                    let op = *op;
                    let (_, buf, _) = self.partial.take().unwrap();
                    return finish(op, buf).map(Some);
                }
            }
        }
        Ok(None)
    }
}

fn finish(op: Opcode, payload: Vec<u8>) -> Result<Message, WsError> {
    match op {
        Opcode::Text => String::from_utf8(payload)
            .map(Message::Text)
            .map_err(|_| WsError::ProtocolViolation("text message is not UTF-8")),
        _ => Ok(Message::Binary(payload)),
    }
}

fn random_mask() -> [u8; 4] {
    let mut k = [0u8; 4];
    rand::rng().fill_bytes(&mut k);
    k
}

fn close_payload(code: u16) -> Vec<u8> {
    code.to_be_bytes().to_vec()
}

/// Read half of a WebSocket connection.
pub struct WsReader {
    stream: TcpStream,
    side: Side,
    buf: Vec<u8>,
    assembler: MessageAssembler,
}

impl WsReader {
    fn new(stream: TcpStream, side: Side, leftover: Vec<u8>) -> Self {
        WsReader {
            stream,
            side,
            buf: leftover,
            assembler: MessageAssembler::default(),
        }
    }

    /// Next message, including control messages. `Ok(None)` on read timeout.
    pub fn read_message(&mut self) -> Result<Option<Message>, WsError> {
        let mut chunk = [0u8; 16 * 1024];
        loop {
            while let Some((frame, used)) = decode_frame(&self.buf, self.side)? {
                self.buf.drain(..used);
                if let Some(msg) = self.assembler.push(frame)? {
                    return Ok(Some(msg));
                }
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(WsError::ConnectionClosed(None)),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(None)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }
}

/// Write half of a WebSocket connection. Clients mask every frame.
pub struct WsWriter {
    stream: TcpStream,
    masked: bool,
}

impl WsWriter {
    pub fn send(&mut self, opcode: Opcode, payload: &[u8]) -> io::Result<()> {
        let mask = self.masked.then(random_mask);
        self.stream
            .write_all(&encode_frame(true, opcode, payload, mask))
    }

    pub fn send_binary(&mut self, payload: &[u8]) -> io::Result<()> {
        self.send(Opcode::Binary, payload)
    }

    pub fn send_close(&mut self, code: u16) -> io::Result<()> {
        self.send(Opcode::Close, &close_payload(code))
    }

    /// Writes bytes that are already framed.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Blocking single-threaded WebSocket client. Pings are answered while
/// reading; protocol violations close the connection with status 1002.
pub struct WsStream {
    reader: WsReader,
    writer: WsWriter,
    closed: bool,
}

impl WsStream {
    /// Connects and completes the opening handshake on `path`.
    pub fn connect<A: ToSocketAddrs>(addr: A, path: &str) -> Result<WsStream, WsError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let host = stream.peer_addr()?.to_string();
        let mut raw = [0u8; 16];
        rand::rng().fill_bytes(&mut raw);
        let key = BASE64.encode(raw);
        stream.write_all(client_request(&host, path, &key).as_bytes())?;

        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let mut buf = Vec::new();
        let mut chunk = [0u8; 1024];
        let end = loop {
            if let Some(end) = header_end(&buf) {
                break end;
            }
            if buf.len() > MAX_REQUEST_BYTES {
                return Err(WsError::Handshake("response header too long".into()));
            }
            let n = stream.read(&mut chunk)?;
            if n == 0 {
                return Err(WsError::Handshake(
                    "connection closed during handshake".into(),
                ));
            }
            buf.extend_from_slice(&chunk[..n]);
        };
        let head = String::from_utf8_lossy(&buf[..end]).to_string();
        if !head.starts_with("HTTP/1.1 101") {
            return Err(WsError::Handshake(
                head.lines().next().unwrap_or_default().to_string(),
            ));
        }
        let expected = accept_key(&key)?;
        let accepted = head
            .lines()
            .filter_map(|l| l.split_once(':'))
            .find(|(n, _)| n.trim().eq_ignore_ascii_case("sec-websocket-accept"))
            .map(|(_, v)| v.trim().to_string());
        if accepted.as_deref() != Some(expected.as_str()) {
            return Err(WsError::Handshake("Sec-WebSocket-Accept mismatch".into()));
        }
        stream.set_read_timeout(None)?;
        let leftover = buf[end..].to_vec();
        Ok(WsStream {
            writer: WsWriter {
                stream: stream.try_clone()?,
                masked: true,
            },
            reader: WsReader::new(stream, Side::Client, leftover),
            closed: false,
        })
    }

    pub fn send_binary(&mut self, payload: &[u8]) -> Result<(), WsError> {
        if self.closed {
            return Err(WsError::ConnectionClosed(None));
        }
        self.writer.send_binary(payload).map_err(WsError::from)
    }

    /// Sends a data message split into `parts` continuation frames.
    pub fn send_fragmented(&mut self, payload: &[u8], parts: usize) -> Result<(), WsError> {
        let parts = parts.max(1);
        let step = payload.len().div_ceil(parts).max(1);
        let chunks: Vec<&[u8]> = payload.chunks(step).collect();
        for (i, c) in chunks.iter().enumerate() {
            let op = if i == 0 {
                Opcode::Binary
            } else {
                Opcode::Continuation
            };
            let bytes = encode_frame(i + 1 == chunks.len(), op, c, Some(random_mask()));
            self.writer.send_raw(&bytes)?;
        }
        Ok(())
    }

    pub fn send_ping(&mut self, payload: &[u8]) -> Result<(), WsError> {
        self.writer
            .send(Opcode::Ping, payload)
            .map_err(WsError::from)
    }

    pub fn writer_mut(&mut self) -> &mut WsWriter {
        &mut self.writer
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.reader.set_read_timeout(t)
    }

    /// Next data message (or pong). `Ok(None)` on read timeout.
    pub fn recv_message(&mut self) -> Result<Option<Message>, WsError> {
        loop {
            match self.reader.read_message() {
                Ok(Some(Message::Ping(p))) => self.writer.send(Opcode::Pong, &p)?,
                Ok(Some(Message::Close(code))) => {
                    if !self.closed {
                        let _ = self.writer.send_close(code.unwrap_or(CLOSE_NORMAL));
                    }
                    self.closed = true;
                    self.writer.shutdown();
                    return Err(WsError::ConnectionClosed(code));
                }
                Ok(other) => return Ok(other),
                Err(e) => {
                    if let Some(code) = e.close_code() {
                        let _ = self.writer.send_close(code);
                        self.writer.shutdown();
                    }
                    self.closed = true;
                    return Err(e);
                }
            }
        }
    }

    pub fn close(&mut self) {
        if !self.closed {
            let _ = self.writer.send_close(CLOSE_NORMAL);
            self.closed = true;
        }
        self.writer.shutdown();
    }
}

/// Publishes frame packets over a `/publish` connection.
pub struct WsFrameSink {
    stream: Option<WsStream>,
}

impl WsFrameSink {
    pub fn new(stream: WsStream) -> Self {
        WsFrameSink {
            stream: Some(stream),
        }
    }

    pub fn disconnected() -> Self {
        WsFrameSink { stream: None }
    }

    pub fn reconnect(&mut self, stream: WsStream) {
        self.stream = Some(stream);
    }

    pub fn is_connected(&self) -> bool {
        self.stream.is_some()
    }

    pub fn close(&mut self) {
        if let Some(mut s) = self.stream.take() {
            s.close();
        }
    }
}

impl FrameSink for WsFrameSink {
    fn send_frame(&mut self, pkt: &FramePacket) -> Result<(), NotConnected> {
        let s = self.stream.as_mut().ok_or(NotConnected)?;
        let bytes = encode_frame_packet(pkt).map_err(|_| NotConnected)?;
        if s.send_binary(&bytes).is_err() {
            self.stream = None;
            return Err(NotConnected);
        }
        Ok(())
    }
}

/// SHA-256 of a frame's bytes, for end-to-end integrity checks.
pub fn frame_digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub type ObserverId = u64;

#[derive(Debug, Clone)]
enum Outbound {
    Binary(Arc<Vec<u8>>),
    Control(Opcode, Vec<u8>),
}

/// The set of observers a published message is copied to.
#[derive(Debug, Default)]
pub struct FanOut<S> {
    observers: BTreeMap<ObserverId, S>,
    next_id: ObserverId,
    published: u64,
    deliveries: u64,
}

impl<S> FanOut<S> {
    pub fn new() -> Self {
        FanOut {
            observers: BTreeMap::new(),
            next_id: 1,
            published: 0,
            deliveries: 0,
        }
    }

    pub fn register_observer(&mut self, sink: S) -> ObserverId {
        let id = self.next_id;
        self.next_id += 1;
        self.observers.insert(id, sink);
        id
    }

    pub fn remove(&mut self, id: ObserverId) {
        self.observers.remove(&id);
    }

    pub fn observer_count(&self) -> usize {
        self.observers.len()
    }

    pub fn published(&self) -> u64 {
        self.published
    }

    pub fn deliveries(&self) -> u64 {
        self.deliveries
    }

    /// Hands `msg` to every observer; observers whose `deliver` fails are
    /// dropped. Returns the number of successful deliveries.
    pub fn broadcast<M>(&mut self, msg: &M, mut deliver: impl FnMut(&mut S, &M) -> bool) -> usize {
        self.published += 1;
        let mut dead = Vec::new();
        let mut n = 0;
        for (id, s) in self.observers.iter_mut() {
            if deliver(s, msg) {
                n += 1;
            } else {
                dead.push(*id);
            }
        }
        for id in dead {
            self.observers.remove(&id);
        }
        self.deliveries += n as u64;
        n
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FrameServerStats {
    pub published: u64,
    pub deliveries: u64,
    pub protocol_violations: u64,
    pub rejected_handshakes: u64,
}

/// Relay server: binary messages from publishers are copied unchanged to every
/// observer connected at the time.
pub struct FrameServer {
    addr: SocketAddr,
    fanout: Arc<Mutex<FanOut<Sender<Outbound>>>>,
    violations: Arc<AtomicU64>,
    rejected: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(20);

impl FrameServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> io::Result<FrameServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let fanout = Arc::new(Mutex::new(FanOut::new()));
        let violations = Arc::new(AtomicU64::new(0));
        let rejected = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let ctx = ServerCtx {
            fanout: fanout.clone(),
            violations: violations.clone(),
            rejected: rejected.clone(),
            stop: stop.clone(),
        };
        let accept = thread::Builder::new()
            .name("ws-accept".into())
            .spawn(move || ws_accept_loop(listener, ctx))?;
        Ok(FrameServer {
            addr,
            fanout,
            violations,
            rejected,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn observer_count(&self) -> usize {
        self.fanout.lock().unwrap().observer_count()
    }

    pub fn stats(&self) -> FrameServerStats {
        let f = self.fanout.lock().unwrap();
        FrameServerStats {
            published: f.published(),
            deliveries: f.deliveries(),
            protocol_violations: self.violations.load(Ordering::SeqCst),
            rejected_handshakes: self.rejected.load(Ordering::SeqCst),
        }
    }

    pub fn shutdown(mut self) -> FrameServerStats {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let stats = self.stats();
        self.fanout.lock().unwrap().observers.clear();
        stats
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

#[derive(Clone)]
struct ServerCtx {
    fanout: Arc<Mutex<FanOut<Sender<Outbound>>>>,
    violations: Arc<AtomicU64>,
    rejected: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
}

fn ws_accept_loop(listener: TcpListener, ctx: ServerCtx) {
    let mut handles = Vec::new();
    while !ctx.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let ctx = ctx.clone();
                handles.push(thread::spawn(move || {
                    if let Err(e) = ws_serve_conn(stream, &ctx) {
                        log::debug!("ws: {peer}: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("ws: accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for h in handles {
        let _ = h.join();
    }
}

/// Reads the upgrade request. Any byte after the request header arrived
/// before the handshake completed and is refused.
fn read_upgrade(stream: &mut TcpStream) -> Result<UpgradeRequest, WsError> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(WsError::Handshake("closed before request".into()));
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some((req, used)) = parse_upgrade_request(&buf)? {
            if used != buf.len() {
                return Err(WsError::ProtocolViolation(
                    "data sent before handshake completed",
                ));
            }
            return Ok(req);
        }
    }
}

fn ws_serve_conn(mut stream: TcpStream, ctx: &ServerCtx) -> Result<(), WsError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let req = match read_upgrade(&mut stream) {
        Ok(r) => r,
        Err(e) => {
            ctx.rejected.fetch_add(1, Ordering::SeqCst);
            let _ = stream.write_all(
                b"HTTP/1.1 400 Bad Request\r\nConnection: close\r\nContent-Length: 0\r\n\r\n",
            );
            let _ = stream.shutdown(Shutdown::Both);
            return Err(e);
        }
    };

    let (tx, rx) = mpsc::channel::<Outbound>();
    // Register before answering so nothing published after the client sees
    // the 101 is missed; queued frames are written after the response.
    let observer = match req.role {
        ConnRole::Observer => Some(ctx.fanout.lock().unwrap().register_observer(tx.clone())),
        ConnRole::Publisher => None,
    };
    stream.write_all(upgrade_response(&req.key)?.as_bytes())?;

    let mut writer = WsWriter {
        stream: stream.try_clone()?,
        masked: false,
    };
    let write_thread = thread::spawn(move || {
        for out in rx {
            let res = match out {
                Outbound::Binary(bytes) => writer.send_binary(&bytes),
                Outbound::Control(op, payload) => {
                    let r = writer.send(op, &payload);
                    if op == Opcode::Close {
                        writer.shutdown();
                        break;
                    }
                    r
                }
            };
            if res.is_err() {
                break;
            }
        }
    });

    stream.set_read_timeout(Some(POLL))?;
    let mut reader = WsReader::new(stream, Side::Server, Vec::new());
    let result = loop {
        if ctx.stop.load(Ordering::SeqCst) {
            let _ = tx.send(Outbound::Control(Opcode::Close, close_payload(1001)));
            break Ok(());
        }
        match reader.read_message() {
            Ok(None) => continue,
            Ok(Some(Message::Binary(bytes))) => match req.role {
                ConnRole::Publisher => {
                    let bytes = Arc::new(bytes);
                    ctx.fanout
                        .lock()
                        .unwrap()
                        .broadcast(&bytes, |s, b| s.send(Outbound::Binary(b.clone())).is_ok());
                }
                ConnRole::Observer => log::debug!("ws: ignoring data from observer"),
            },
            Ok(Some(Message::Text(_))) | Ok(Some(Message::Pong(_))) => {}
            Ok(Some(Message::Ping(p))) => {
                let _ = tx.send(Outbound::Control(Opcode::Pong, p));
            }
            Ok(Some(Message::Close(code))) => {
                let _ = tx.send(Outbound::Control(
                    Opcode::Close,
                    close_payload(code.unwrap_or(CLOSE_NORMAL)),
                ));
                break Ok(());
            }
            Err(e) => {
                if let Some(code) = e.close_code() {
                    ctx.violations.fetch_add(1, Ordering::SeqCst);
                    let _ = tx.send(Outbound::Control(Opcode::Close, close_payload(code)));
                }
                break Err(e);
            }
        }
    };
    if let Some(id) = observer {
        ctx.fanout.lock().unwrap().remove(id);
    }
    drop(tx);
    let _ = write_thread.join();
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc_worked_example() {
        assert_eq!(
            accept_key("dGhlIHNhbXBsZSBub25jZQ==").unwrap(),
            "s3pPLMBiTxaQ9kYGzzhZRbK+xOo="
        );
        assert_eq!(
            accept_key("dGhlIHNhbXBsZSBub25jZQ==").unwrap(),
            accept_key("dGhlIHNhbXBsZSBub25jZQ==").unwrap()
        );
    }

    #[test]
    fn malformed_keys() {
        assert!(matches!(
            accept_key("dGhlIHNhbXBsZSBub25jZQ="),
            Err(WsError::BadKey)
        ));
        assert!(matches!(
            accept_key("!!!!!!!!!!!!!!!!!!!!!!!!"),
            Err(WsError::BadKey)
        ));
        assert!(matches!(accept_key(""), Err(WsError::BadKey)));
    }

    #[test]
    fn parses_upgrade_request() {
        let req = client_request("localhost", "/observe", "dGhlIHNhbXBsZSBub25jZQ==");
        let (r, used) = parse_upgrade_request(req.as_bytes()).unwrap().unwrap();
        assert_eq!(used, req.len());
        assert_eq!(r.role, ConnRole::Observer);
        assert!(parse_upgrade_request(&req.as_bytes()[..20])
            .unwrap()
            .is_none());

        let q = client_request("h", "/feed?role=observer", "dGhlIHNhbXBsZSBub25jZQ==");
        assert_eq!(
            parse_upgrade_request(q.as_bytes()).unwrap().unwrap().0.role,
            ConnRole::Observer
        );

        let bad = client_request("h", "/elsewhere", "dGhlIHNhbXBsZSBub25jZQ==");
        assert!(matches!(
            parse_upgrade_request(bad.as_bytes()),
            Err(WsError::Handshake(_))
        ));
        let no_version = req.replace("Sec-WebSocket-Version: 13", "Sec-WebSocket-Version: 8");
        assert!(parse_upgrade_request(no_version.as_bytes()).is_err());
    }

    #[test]
    fn frame_before_handshake_is_not_http() {
        let frame = encode_frame(true, Opcode::Binary, b"hi", Some([1, 2, 3, 4]));
        assert!(matches!(
            parse_upgrade_request(&frame),
            Err(WsError::Handshake(_))
        ));
    }

    #[test]
    fn frame_lengths_and_masking() {
        for len in [0usize, 125, 126, 65_535, 65_536, 200_000] {
            let payload: Vec<u8> = (0..len).map(|i| i as u8).collect();
            let masked = encode_frame(true, Opcode::Binary, &payload, Some([9, 8, 7, 6]));
            let (f, used) = decode_frame(&masked, Side::Server).unwrap().unwrap();
            assert_eq!(used, masked.len());
            assert_eq!(f.payload, payload);
            let plain = encode_frame(true, Opcode::Binary, &payload, None);
            let (f, _) = decode_frame(&plain, Side::Client).unwrap().unwrap();
            assert_eq!(f.payload, payload);
            assert!(
                decode_frame(&plain[..plain.len() - 1], Side::Client)
                    .unwrap()
                    .is_none()
                    || len == 0
            );
        }
        // RFC 6455 §5.7 single-frame unmasked "Hello".
        assert_eq!(
            encode_frame(true, Opcode::Text, b"Hello", None),
            [0x81, 0x05, 0x48, 0x65, 0x6c, 0x6c, 0x6f]
        );
        // And its masked counterpart.
        let masked = [
            0x81, 0x85, 0x37, 0xfa, 0x21, 0x3d, 0x7f, 0x9f, 0x4d, 0x51, 0x58,
        ];
        assert_eq!(
            encode_frame(true, Opcode::Text, b"Hello", Some([0x37, 0xfa, 0x21, 0x3d])),
            masked
        );
        let (f, _) = decode_frame(&masked, Side::Server).unwrap().unwrap();
        assert_eq!(f.payload, b"Hello");
    }

    #[test]
    fn conformance_violations() {
        let unmasked = encode_frame(true, Opcode::Binary, b"x", None);
        let e = decode_frame(&unmasked, Side::Server).unwrap_err();
        assert!(matches!(
            e,
            WsError::ProtocolViolation("unmasked client frame")
        ));
        assert_eq!(e.close_code(), Some(1002));

        let mut rsv = encode_frame(true, Opcode::Binary, b"x", Some([1, 1, 1, 1]));
        rsv[0] |= 0x40;
        assert!(matches!(
            decode_frame(&rsv, Side::Server),
            Err(WsError::ProtocolViolation(_))
        ));

        let masked_from_server = encode_frame(true, Opcode::Binary, b"x", Some([1, 1, 1, 1]));
        assert!(decode_frame(&masked_from_server, Side::Client).is_err());

        let big_ping = encode_frame(true, Opcode::Ping, &[0; 126], Some([0; 4]));
        assert!(decode_frame(&big_ping, Side::Server).is_err());
        let split_ping = encode_frame(false, Opcode::Ping, b"p", Some([0; 4]));
        assert!(decode_frame(&split_ping, Side::Server).is_err());

        let mut unknown = encode_frame(true, Opcode::Binary, b"x", Some([0; 4]));
        unknown[0] = 0x83;
        assert!(decode_frame(&unknown, Side::Server).is_err());

        let huge = [0x82, 0xFF, 0, 0, 0, 0, 0x10, 0, 0, 0];
        assert!(matches!(
            decode_frame(&huge, Side::Server),
            Err(WsError::MessageTooBig)
        ));
    }

    fn frame(fin: bool, opcode: Opcode, p: &[u8]) -> Frame {
        Frame {
            fin,
            opcode,
            payload: p.to_vec(),
        }
    }

    #[test]
    fn fragment_reassembly() {
        let mut a = MessageAssembler::default();
        assert_eq!(a.push(frame(false, Opcode::Binary, b"ab")).unwrap(), None);
        assert_eq!(
            a.push(frame(true, Opcode::Ping, b"p")).unwrap(),
            Some(Message::Ping(b"p".to_vec()))
        );
        assert_eq!(
            a.push(frame(false, Opcode::Continuation, b"cd")).unwrap(),
            None
        );
        assert_eq!(
            a.push(frame(true, Opcode::Continuation, b"e")).unwrap(),
            Some(Message::Binary(b"abcde".to_vec()))
        );
        assert!(a.push(frame(true, Opcode::Continuation, b"x")).is_err());

        let mut a = MessageAssembler::default();
        a.push(frame(false, Opcode::Binary, b"0")).unwrap();
        for _ in 0..MAX_FRAGMENTS - 2 {
            a.push(frame(false, Opcode::Continuation, b"1")).unwrap();
        }
        assert!(a
            .push(frame(true, Opcode::Continuation, b"2"))
            .unwrap()
            .is_some());

        let mut a = MessageAssembler::default();
        a.push(frame(false, Opcode::Binary, b"0")).unwrap();
        for _ in 0..MAX_FRAGMENTS - 1 {
            a.push(frame(false, Opcode::Continuation, b"1")).unwrap();
        }
        assert!(matches!(
            a.push(frame(true, Opcode::Continuation, b"2")),
            Err(WsError::ProtocolViolation("too many fragments"))
        ));

        let mut a = MessageAssembler::default();
        a.push(frame(false, Opcode::Text, b"a")).unwrap();
        assert!(a.push(frame(true, Opcode::Binary, b"b")).is_err());
    }

    #[test]
    fn close_codes() {
        let mut a = MessageAssembler::default();
        assert_eq!(
            a.push(frame(true, Opcode::Close, &1002u16.to_be_bytes()))
                .unwrap(),
            Some(Message::Close(Some(1002)))
        );
        assert_eq!(
            a.push(frame(true, Opcode::Close, &[])).unwrap(),
            Some(Message::Close(None))
        );
    }

    #[test]
    fn fanout_counts() {
        let mut f: FanOut<Vec<u32>> = FanOut::new();
        assert_eq!(
            f.broadcast(&7, |s, m| {
                s.push(*m);
                true
            }),
            0
        );
        let a = f.register_observer(Vec::new());
        f.register_observer(Vec::new());
        assert_eq!(
            f.broadcast(&1, |s, m| {
                s.push(*m);
                true
            }),
            2
        );
        f.remove(a);
        assert_eq!(
            f.broadcast(&2, |s, m| {
                s.push(*m);
                true
            }),
            1
        );
        assert_eq!(f.observers.values().next().unwrap(), &vec![1, 2]);
        // A failing observer is dropped.
        assert_eq!(f.broadcast(&3, |_, _| false), 0);
        assert_eq!(f.observer_count(), 0);
        assert_eq!((f.published(), f.deliveries()), (4, 3));
    }
}
