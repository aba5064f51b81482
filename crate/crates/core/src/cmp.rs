//! Simulated Contingency Management Platform.
//!
//! [`CmpHub`] holds the protocol logic with no I/O: connections register with
//! a `hello`, System Messages update the fleet table, Fault Messages become
//! alerts fanned out to every registered connection. [`CmpServer`] and
//! [`CmpClient`] put the hub behind blocking TCP sockets using the
//! length-prefixed JSON framing from [`crate::wire`].

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::clock::Clock;
use crate::wire::{
    encode_cmp_record, CmpDecoder, CmpFrame, FaultMessage, SystemMessage, WireError,
};

pub type ConnId = u64;

/// Entries not updated within this window are reported stale.
pub const DEFAULT_STALENESS_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleetEntry {
    pub client_id: String,
    pub last_system: SystemMessage,
    pub last_update_ts_ms: u64,
}

/// Snapshot row returned by [`CmpHub::query_fleet`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleetStatus {
    #[serde(flatten)]
    pub entry: FleetEntry,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlertRecord {
    pub alert_seq: u64,
    pub fault: FaultMessage,
    pub received_ts_ms: u64,
    pub origin: String,
}

/// A System or Fault record as accepted by the hub.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedRecord {
    pub conn: ConnId,
    pub client_id: String,
    pub frame: CmpFrame,
    pub received_ts_ms: u64,
}

/// A frame the hub wants delivered to one connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: ConnId,
    pub frame: CmpFrame,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CmpError {
    #[error("protocol error: {0}")]
    Protocol(#[from] WireError),
    #[error("protocol error: unexpected {0:?} frame from client")]
    UnexpectedKind(&'static str),
    #[error("protocol error: connection already registered as {0:?}")]
    AlreadyRegistered(String),
    #[error("client has not sent hello")]
    UnregisteredClient,
    #[error("unknown connection {0}")]
    UnknownConnection(ConnId),
}

#[derive(Debug, Default)]
struct Conn {
    client_id: Option<String>,
    acks_sent: u64,
}

#[derive(Serialize)]
struct JournalLine<'a> {
    ts_ms: u64,
    event: &'a str,
    client_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    alert_seq: Option<u64>,
    record: &'a CmpFrame,
}

/// Protocol state shared by every connection.
pub struct CmpHub {
    conns: BTreeMap<ConnId, Conn>,
    next_conn: ConnId,
    fleet: BTreeMap<String, FleetEntry>,
    alerts: Vec<AlertRecord>,
    received: Vec<ReceivedRecord>,
    protocol_errors: u64,
    rejected: u64,
    alert_deliveries: u64,
    staleness_ms: u64,
    journal: Option<Box<dyn Write + Send>>,
}

impl Default for CmpHub {
    fn default() -> Self {
        Self::new(DEFAULT_STALENESS_MS)
    }
}

impl std::fmt::Debug for CmpHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CmpHub")
            .field("conns", &self.conns.len())
            .field("fleet", &self.fleet.len())
            .field("alerts", &self.alerts.len())
            .field("protocol_errors", &self.protocol_errors)
            .finish()
    }
}

impl CmpHub {
    pub fn new(staleness_ms: u64) -> Self {
        CmpHub {
            conns: BTreeMap::new(),
            next_conn: 1,
            fleet: BTreeMap::new(),
            alerts: Vec::new(),
            received: Vec::new(),
            protocol_errors: 0,
            rejected: 0,
            alert_deliveries: 0,
            staleness_ms,
            journal: None,
        }
    }

    /// Appends one JSON line per accepted record to `w`.
    pub fn with_journal(mut self, w: Box<dyn Write + Send>) -> Self {
        self.journal = Some(w);
        self
    }

    pub fn connect(&mut self) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(id, Conn::default());
        id
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
    }

    /// Connections that completed the hello exchange.
    pub fn registered(&self) -> impl Iterator<Item = (ConnId, &str)> {
        self.conns
            .iter()
            .filter_map(|(id, c)| c.client_id.as_deref().map(|cid| (*id, cid)))
    }

    pub fn alerts(&self) -> &[AlertRecord] {
        &self.alerts
    }

    pub fn received(&self) -> &[ReceivedRecord] {
        &self.received
    }

    pub fn protocol_errors(&self) -> u64 {
        self.protocol_errors
    }

    /// Records refused because the connection never registered.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn alert_deliveries(&self) -> u64 {
        self.alert_deliveries
    }

    fn ack(&mut self, conn: ConnId) -> Outgoing {
        let c = self
            .conns
            .get_mut(&conn)
            .expect("caller checked connection");
        c.acks_sent += 1;
        Outgoing {
            to: conn,
            frame: CmpFrame::Ack { seq: c.acks_sent },
        }
    }

    fn journal(&mut self, line: JournalLine<'_>) {
        if let Some(w) = self.journal.as_mut() {
            let res = serde_json::to_writer(&mut *w, &line)
                .map_err(io::Error::from)
                .and_then(|_| w.write_all(b"\n"));
            if let Err(e) = res {
                log::warn!("cmp journal write failed: {e}");
            }
        }
    }

    /// Counts a stream-level decode failure and builds the error reply.
    pub fn note_protocol_error(&mut self, conn: ConnId, err: &WireError) -> Outgoing {
        self.protocol_errors += 1;
        Outgoing {
            to: conn,
            frame: CmpFrame::Error {
                reason: err.to_string(),
            },
        }
    }

    /// Applies one decoded frame from `conn`.
    ///
    /// On success returns the Ack for the sender followed by any alert
    /// deliveries. On failure the state is unchanged; pair the error with
    /// [`CmpHub::error_reply`] to answer the client.
    pub fn handle_record(
        &mut self,
        conn: ConnId,
        frame: CmpFrame,
        now_ms: u64,
    ) -> Result<Vec<Outgoing>, CmpError> {
        let Some(c) = self.conns.get_mut(&conn) else {
            return Err(CmpError::UnknownConnection(conn));
        };
        let client_id = match (&frame, &c.client_id) {
            (CmpFrame::Hello { client_id }, None) => {
                c.client_id = Some(client_id.clone());
                return Ok(vec![self.ack(conn)]);
            }
            (CmpFrame::Hello { client_id }, Some(existing)) => {
                if client_id != existing {
                    self.protocol_errors += 1;
                    return Err(CmpError::AlreadyRegistered(existing.clone()));
                }
                return Ok(vec![self.ack(conn)]);
            }
            (CmpFrame::System(_) | CmpFrame::Fault(_), None) => {
                self.rejected += 1;
                return Err(CmpError::UnregisteredClient);
            }
            (CmpFrame::System(_) | CmpFrame::Fault(_), Some(id)) => id.clone(),
            (other, _) => {
                self.protocol_errors += 1;
                return Err(CmpError::UnexpectedKind(other.kind()));
            }
        };

        self.received.push(ReceivedRecord {
            conn,
            client_id: client_id.clone(),
            frame: frame.clone(),
            received_ts_ms: now_ms,
        });

        match frame {
            CmpFrame::System(m) => {
                let entry = self.fleet.entry(client_id.clone()).or_insert(FleetEntry {
                    client_id: client_id.clone(),
                    last_system: m,
                    last_update_ts_ms: now_ms,
                });
                if m.msg_timestamp_ms >= entry.last_system.msg_timestamp_ms {
                    entry.last_system = m;
                }
                entry.last_update_ts_ms = entry.last_update_ts_ms.max(now_ms);
                self.journal(JournalLine {
                    ts_ms: now_ms,
                    event: "system",
                    client_id: &client_id,
                    alert_seq: None,
                    record: &CmpFrame::System(m),
                });
                Ok(vec![self.ack(conn)])
            }
            CmpFrame::Fault(fault) => {
                let alert_seq = self.alerts.len() as u64 + 1;
                self.alerts.push(AlertRecord {
                    alert_seq,
                    fault,
                    received_ts_ms: now_ms,
                    origin: client_id.clone(),
                });
                self.journal(JournalLine {
                    ts_ms: now_ms,
                    event: "fault",
                    client_id: &client_id,
                    alert_seq: Some(alert_seq),
                    record: &CmpFrame::Fault(fault),
                });
                let mut out = vec![self.ack(conn)];
                let targets: Vec<ConnId> = self.registered().map(|(id, _)| id).collect();
                self.alert_deliveries += targets.len() as u64;
                out.extend(targets.into_iter().map(|to| Outgoing {
                    to,
                    frame: CmpFrame::Alert { alert_seq, fault },
                }));
                Ok(out)
            }
            _ => unreachable!("filtered above"),
        }
    }

    pub fn error_reply(conn: ConnId, err: &CmpError) -> Outgoing {
        Outgoing {
            to: conn,
            frame: CmpFrame::Error {
                reason: err.to_string(),
            },
        }
    }

    /// All fleet entries, flagged stale when older than the horizon.
    pub fn query_fleet(&self, now_ms: u64) -> Vec<FleetStatus> {
        self.fleet
            .values()
            .map(|e| FleetStatus {
                stale: now_ms.saturating_sub(e.last_update_ts_ms) > self.staleness_ms,
                entry: e.clone(),
            })
            .collect()
    }
}

struct Shared {
    hub: CmpHub,
    writers: BTreeMap<ConnId, Sender<Vec<u8>>>,
}

impl Shared {
    fn dispatch(&mut self, out: Vec<Outgoing>) {
        for o in out {
            let Some(tx) = self.writers.get(&o.to) else {
                continue;
            };
            match encode_cmp_record(&o.frame) {
                Ok(bytes) => {
                    let _ = tx.send(bytes);
                }
                Err(e) => log::error!("cmp: cannot encode outgoing {}: {e}", o.frame.kind()),
            }
        }
    }
}

/// TCP front end for a [`CmpHub`].
pub struct CmpServer {
    addr: SocketAddr,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(20);

impl CmpServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, hub: CmpHub, clock: Arc<dyn Clock>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Mutex::new(Shared {
            hub,
            writers: BTreeMap::new(),
        }));
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let shared = shared.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("cmp-accept".into())
                .spawn(move || accept_loop(listener, shared, stop, clock))?
        };
        Ok(CmpServer {
            addr,
            shared,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the hub under the server lock.
    pub fn with_hub<R>(&self, f: impl FnOnce(&CmpHub) -> R) -> R {
        f(&lock(&self.shared).hub)
    }

    /// Stops accepting, closes every connection and returns the hub.
    pub fn shutdown(mut self) -> CmpHub {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let mut g = lock(&self.shared);
        g.writers.clear();
        std::mem::take(&mut g.hub)
    }
}

impl Drop for CmpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn lock(m: &Mutex<Shared>) -> MutexGuard<'_, Shared> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    clock: Arc<dyn Clock>,
) {
    let mut handles = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("cmp: connection from {peer}");
                let shared = shared.clone();
                let stop = stop.clone();
                let clock = clock.clone();
                handles.push(thread::spawn(move || {
                    if let Err(e) = serve_conn(stream, shared, stop, clock) {
                        log::debug!("cmp: connection {peer} ended: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("cmp: accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for h in handles {
        let _ = h.join();
    }
}

fn serve_conn(
    stream: TcpStream,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    clock: Arc<dyn Clock>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let conn = {
        let mut g = lock(&shared);
        let id = g.hub.connect();
        g.writers.insert(id, tx);
        id
    };
    let write_thread = thread::spawn(move || {
        for bytes in rx {
            if writer.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(Shutdown::Write);
    });

    let mut reader = stream;
    let mut decoder = CmpDecoder::new();
    let mut buf = [0u8; 8192];
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        let n = match reader.read(&mut buf) {
            Ok(0) => break Ok(()),
            Ok(n) => n,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                continue
            }
            Err(e) => break Err(e),
        };
        decoder.push(&buf[..n]);
        while let Some(item) = decoder.next_frame() {
            let now = clock.now_ms();
            let mut g = lock(&shared);
            let out = match item {
                Ok(frame) => match g.hub.handle_record(conn, frame, now) {
                    Ok(out) => out,
                    Err(e) => vec![CmpHub::error_reply(conn, &e)],
                },
                Err(e) => vec![g.hub.note_protocol_error(conn, &e)],
            };
            g.dispatch(out);
        }
    };
    {
        let mut g = lock(&shared);
        g.hub.disconnect(conn);
        g.writers.remove(&conn);
    }
    let _ = write_thread.join();
    result
}

/// Blocking client for the CMP stream.
pub struct CmpClient {
    stream: TcpStream,
    decoder: CmpDecoder,
}

impl CmpClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(CmpClient {
            stream,
            decoder: CmpDecoder::new(),
        })
    }

    /// Connects and registers, waiting for the hello Ack.
    pub fn connect_as<A: ToSocketAddrs>(
        addr: A,
        client_id: &str,
        timeout: Duration,
    ) -> io::Result<Self> {
        let mut c = Self::connect(addr)?;
        c.send(&CmpFrame::Hello {
            client_id: client_id.into(),
        })?;
        match c.recv_timeout(timeout)? {
            Some(CmpFrame::Ack { .. }) => Ok(c),
            other => Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("expected hello ack, got {other:?}"),
            )),
        }
    }

    pub fn send(&mut self, frame: &CmpFrame) -> io::Result<()> {
        let bytes =
            encode_cmp_record(frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.stream.write_all(&bytes)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    /// Next frame from the server, `None` on timeout.
    pub fn recv_timeout(&mut self, timeout: Duration) -> io::Result<Option<CmpFrame>> {
        let deadline = Instant::now() + timeout;
        let mut buf = [0u8; 8192];
        loop {
            if let Some(item) = self.decoder.next_frame() {
                return item
                    .map(Some)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(left))?;
            match self.stream.read(&mut buf) {
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => self.decoder.push(&buf[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(None)
                }
                Err(e) => return Err(e),
            }
        }
    }
}
