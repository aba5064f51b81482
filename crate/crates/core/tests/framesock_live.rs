use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use quickclear::framesock::{
    encode_frame, frame_digest, FrameServer, Message, Opcode, WsError, WsStream,
    CLOSE_PROTOCOL_ERROR, CLOSE_TOO_BIG, MAX_MESSAGE,
};

const WAIT: Duration = Duration::from_secs(5);

fn server() -> FrameServer {
    FrameServer::bind("127.0.0.1:0").unwrap()
}

fn observer(srv: &FrameServer) -> WsStream {
    let ws = WsStream::connect(srv.local_addr(), "/observe").unwrap();
    ws.set_read_timeout(Some(WAIT)).unwrap();
    ws
}

fn next_binary(ws: &mut WsStream) -> Vec<u8> {
    let deadline = Instant::now() + WAIT;
    while Instant::now() < deadline {
        if let Some(Message::Binary(b)) = ws.recv_message().unwrap() {
            return b;
        }
    }
    panic!("no binary message");
}

/// Reads until the server's close frame and returns its status code.
fn close_code(ws: &mut WsStream) -> Option<u16> {
    let deadline = Instant::now() + WAIT;
    while Instant::now() < deadline {
        match ws.recv_message() {
            Ok(_) => continue,
            Err(WsError::ConnectionClosed(code)) => return code,
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    panic!("server never closed");
}

#[test]
fn publisher_frames_reach_every_observer_unchanged() {
    let srv = server();
    let mut a = observer(&srv);
    let mut b = observer(&srv);
    let mut publisher = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    let msgs: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i; 1000 + 37 * i as usize]).collect();
    for m in &msgs {
        publisher.send_binary(m).unwrap();
    }
    for ws in [&mut a, &mut b] {
        for m in &msgs {
            assert_eq!(frame_digest(&next_binary(ws)), frame_digest(m));
        }
    }
    let stats = srv.stats();
    assert_eq!(stats.published, 20);
    assert_eq!(stats.deliveries, 40);
}

#[test]
fn fragmented_message_is_reassembled() {
    let srv = server();
    let mut obs = observer(&srv);
    let mut publisher = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    let payload: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
    publisher.send_fragmented(&payload, 7).unwrap();
    assert_eq!(next_binary(&mut obs), payload);
}

#[test]
fn unmasked_client_frame_closes_with_1002() {
    let srv = server();
    let mut ws = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    ws.set_read_timeout(Some(WAIT)).unwrap();
    ws.writer_mut()
        .send_raw(&encode_frame(true, Opcode::Binary, b"no mask", None))
        .unwrap();
    assert_eq!(close_code(&mut ws), Some(CLOSE_PROTOCOL_ERROR));
    assert_eq!(srv.stats().protocol_violations, 1);
}

#[test]
fn oversized_message_closes_with_1009() {
    let srv = server();
    let mut ws = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    ws.set_read_timeout(Some(WAIT)).unwrap();
    // Only the header is needed: the length alone is over the limit.
    let big = encode_frame(
        true,
        Opcode::Binary,
        &vec![0u8; MAX_MESSAGE + 1],
        Some([1, 2, 3, 4]),
    );
    ws.writer_mut().send_raw(&big[..14]).unwrap();
    assert_eq!(close_code(&mut ws), Some(CLOSE_TOO_BIG));
}

#[test]
fn ping_is_answered() {
    let srv = server();
    let mut ws = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    ws.set_read_timeout(Some(WAIT)).unwrap();
    ws.send_ping(b"hi").unwrap();
    match ws.recv_message().unwrap() {
        Some(Message::Pong(p)) => assert_eq!(p, b"hi"),
        other => panic!("expected pong, got {other:?}"),
    }
}

#[test]
fn bad_handshakes_get_400() {
    let srv = server();
    let requests = [
        "GET /observe HTTP/1.1\r\nHost: x\r\n\r\n".to_string(),
        "GET /elsewhere HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n".to_string(),
        "GET /observe HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: short\r\nSec-WebSocket-Version: 13\r\n\r\n".to_string(),
    ];
    for req in &requests {
        let mut s = TcpStream::connect(srv.local_addr()).unwrap();
        s.set_read_timeout(Some(WAIT)).unwrap();
        s.write_all(req.as_bytes()).unwrap();
        let mut resp = String::new();
        let _ = s.read_to_string(&mut resp);
        assert!(resp.starts_with("HTTP/1.1 400"), "{req:?} -> {resp:?}");
    }
    assert_eq!(srv.stats().rejected_handshakes, requests.len() as u64);
    assert_eq!(srv.observer_count(), 0);
}

#[test]
fn observer_that_leaves_is_dropped_from_fan_out() {
    let srv = server();
    let mut keep = observer(&srv);
    let mut leave = observer(&srv);
    assert_eq!(srv.observer_count(), 2);
    leave.close();
    let deadline = Instant::now() + WAIT;
    while srv.observer_count() != 1 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(srv.observer_count(), 1);
    let mut publisher = WsStream::connect(srv.local_addr(), "/publish").unwrap();
    publisher.send_binary(b"after").unwrap();
    assert_eq!(next_binary(&mut keep), b"after");
}
