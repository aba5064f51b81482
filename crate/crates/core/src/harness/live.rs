//! Loopback run: real UDP, TCP and WebSocket endpoints on one host.
//!
//! Only the DSRC radio is simulated (the seeded channel decides drops and
//! delays, the OBU thread waits them out). Every other hop is a socket, timed
//! with one shared wall clock. Loopback hops routinely finish within the same
//! millisecond, so receive times are clamped to at least one millisecond
//! after the send.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::sim::COMPANION_ID;
use super::{
    AlertDelivery, ChainLog, EventLog, HarnessError, LogEvent, RunOutput, SharedBuf, SystemArrival,
};
use crate::airlink::Channel;
use crate::clock::{Clock, WallClock};
use crate::cmp::{CmpClient, CmpHub, CmpServer};
use crate::companion::{Companion, FramePublisher, IngestOutcome, SyntheticFrameSource};
use crate::framesock::{frame_digest, FrameServer, Message, WsFrameSink, WsStream};
use crate::geo::slant_distance_m;
use crate::metrics::{summarize, Hop, HopRecord};
use crate::scenario::{apply_drift, Scenario};
use crate::wire::{
    decode_cav_state, decode_frame_packet, encode_cav_state, CavStateMessage, CmpFrame,
};

const TICK: Duration = Duration::from_millis(5);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
/// Time allowed for in-flight traffic after the producers stop.
const DRAIN: Duration = Duration::from_millis(300);

type Ledger = BTreeMap<(Hop, u64), (u64, Option<u64>)>;

#[derive(Default)]
struct Shared {
    ledger: Mutex<Ledger>,
    /// CAV transmit timestamp → broadcast id, to match UDP arrivals.
    udp_by_tx: Mutex<BTreeMap<u64, u64>>,
    /// Companion sends, keyed by the record's own timestamp.
    cmp_sent: Mutex<Vec<(CmpKey, u64, u64)>>,
    chain: Mutex<ChainLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpKey {
    System(u64),
    Fault(u64),
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn bind_err(endpoint: &'static str, port: u16) -> impl FnOnce(io::Error) -> HarnessError {
    move |e| {
        if e.kind() == io::ErrorKind::AddrInUse {
            HarnessError::PortInUse { endpoint, port }
        } else {
            HarnessError::Io(e)
        }
    }
}

fn live_err(what: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Live(format!("{what}: {e}"))
}

struct Flags {
    producers: Arc<AtomicBool>,
    companion: Arc<AtomicBool>,
    consumers: Arc<AtomicBool>,
}

/// Runs `sc` on loopback. With `until_chain_complete`, stops as soon as every
/// Quick Clear stage has been observed instead of running the full duration.
pub fn run_live(sc: &Scenario, until_chain_complete: bool) -> Result<RunOutput, HarnessError> {
    let cfg = &sc.config;
    let clock = Arc::new(WallClock::new());
    let shared = Arc::new(Shared::default());
    lock(&shared.chain).zones = if sc.has_cmp() { cfg.zones.len() } else { 0 };
    lock(&shared.chain).frames_per_observer = vec![0; cfg.observers];

    // Servers first, then drivers.
    let udp =
        UdpSocket::bind(("127.0.0.1", cfg.ports.udp)).map_err(bind_err("UDP", cfg.ports.udp))?;
    let udp_addr = udp.local_addr()?;
    let journal = SharedBuf::default();
    let cmp_server = if sc.has_cmp() {
        let hub = CmpHub::new(cfg.staleness_horizon_ms).with_journal(Box::new(journal.clone()));
        let clk: Arc<dyn Clock> = clock.clone();
        Some(
            CmpServer::bind(("127.0.0.1", cfg.ports.cmp), hub, clk)
                .map_err(bind_err("CMP", cfg.ports.cmp))?,
        )
    } else {
        None
    };
    let frame_server =
        FrameServer::bind(("127.0.0.1", cfg.ports.ws)).map_err(bind_err("WS", cfg.ports.ws))?;
    let ws_addr = frame_server.local_addr();

    let flags = Flags {
        producers: Arc::new(AtomicBool::new(false)),
        companion: Arc::new(AtomicBool::new(false)),
        consumers: Arc::new(AtomicBool::new(false)),
    };
    let mut consumers: Vec<JoinHandle<()>> = Vec::new();

    let ws_seed = sc.hop_seed(Hop::Ws);
    let source = SyntheticFrameSource::new(ws_seed, cfg.frame_payload_bytes);
    for obs in 0..cfg.observers {
        let ws =
            WsStream::connect(ws_addr, "/observe").map_err(|e| live_err("observer connect", e))?;
        ws.set_read_timeout(Some(Duration::from_millis(20)))?;
        let (shared, clock, stop, source) = (
            shared.clone(),
            clock.clone(),
            flags.consumers.clone(),
            source.clone(),
        );
        consumers.push(thread::spawn(move || {
            observe(obs, ws, &shared, &clock, &stop, &source)
        }));
    }

    let mut ops_names = Vec::new();
    if let Some(server) = &cmp_server {
        for i in 1..=cfg.cmp_clients {
            let name = format!("ops-{i}");
            let client = CmpClient::connect_as(server.local_addr(), &name, CONNECT_TIMEOUT)
                .map_err(|e| live_err("ops client", e))?;
            let (shared, clock, stop, n) = (
                shared.clone(),
                clock.clone(),
                flags.consumers.clone(),
                name.clone(),
            );
            consumers.push(thread::spawn(move || {
                watch_alerts(client, &n, &shared, &clock, &stop)
            }));
            ops_names.push(name);
        }
    }

    let companion = {
        let cmp_client = match &cmp_server {
            Some(s) => Some(
                CmpClient::connect_as(s.local_addr(), COMPANION_ID, CONNECT_TIMEOUT)
                    .map_err(|e| live_err("companion cmp connect", e))?,
            ),
            None => None,
        };
        let publisher =
            WsStream::connect(ws_addr, "/publish").map_err(|e| live_err("publisher connect", e))?;
        let (sc, shared, clock, stop) = (
            sc.clone(),
            shared.clone(),
            clock.clone(),
            flags.companion.clone(),
        );
        let publisher_src = source.clone();
        thread::spawn(move || {
            companion_loop(
                &sc,
                udp,
                cmp_client,
                publisher,
                publisher_src,
                &shared,
                &clock,
                &stop,
            )
        })
    };

    let obu = {
        let (sc, shared, clock, stop) = (
            sc.clone(),
            shared.clone(),
            clock.clone(),
            flags.producers.clone(),
        );
        thread::spawn(move || obu_loop(&sc, udp_addr, &shared, &clock, &stop))
    };

    let connected = 1 + ops_names.len();
    if sc.has_cmp() {
        lock(&shared.chain).connected_clients = connected;
    }

    // Monitor.
    loop {
        thread::sleep(Duration::from_millis(20));
        if clock.now_ms() >= cfg.duration_ms {
            break;
        }
        if until_chain_complete && chain_complete(&shared, cmp_server.as_ref(), connected) {
            break;
        }
        if obu.is_finished() || companion.is_finished() {
            break;
        }
    }

    // Drain: producers, then the companion, then everything that only listens.
    flags.producers.store(true, Ordering::SeqCst);
    let obu_res = obu.join();
    thread::sleep(DRAIN);
    flags.companion.store(true, Ordering::SeqCst);
    let comp_res = companion.join();
    thread::sleep(DRAIN);
    flags.consumers.store(true, Ordering::SeqCst);
    for h in consumers {
        let _ = h.join();
    }
    if obu_res.is_err() || comp_res.is_err() {
        return Err(HarnessError::Live("an endpoint thread panicked".into()));
    }
    if let Err(e) = comp_res.unwrap() {
        return Err(HarnessError::Live(e));
    }
    let hub = cmp_server.map(CmpServer::shutdown);
    frame_server.shutdown();

    Ok(finish(sc, &shared, hub.as_ref(), journal.take()))
}

fn chain_complete(shared: &Shared, server: Option<&CmpServer>, connected: usize) -> bool {
    let Some(server) = server else { return false };
    let (systems, faults) = server.with_hub(|h| {
        let s = h
            .received()
            .iter()
            .filter(|r| matches!(r.frame, CmpFrame::System(_)))
            .count();
        (s, h.alerts().len())
    });
    let c = lock(&shared.chain);
    let alerts_ok = (1..=faults as u64).all(|seq| {
        c.alert_deliveries
            .iter()
            .filter(|a| a.alert_seq == seq)
            .count()
            == connected
    });
    c.first_dsrc_rx_ms.is_some()
        && c.first_udp_ingest_ms.is_some()
        && systems >= 3
        && faults == c.zones
        && alerts_ok
        && c.frames_per_observer.iter().all(|&n| n >= 5)
}

fn obu_loop(
    sc: &Scenario,
    companion: SocketAddr,
    shared: &Shared,
    clock: &WallClock,
    stop: &AtomicBool,
) {
    let cfg = &sc.config;
    let period = cfg.broadcast_period_ms();
    let mut dsrc = Channel::new(sc.channel_params(Hop::Dsrc)).expect("validated params");
    let sock = UdpSocket::bind("127.0.0.1:0").expect("ephemeral udp socket");
    let mut pending: BinaryHeap<Reverse<(u64, u64, [u8; 56])>> = BinaryHeap::new();
    let mut n = 1u64;
    loop {
        let now = clock.now_ms();
        let broadcasting = !stop.load(Ordering::SeqCst) && n * period <= cfg.duration_ms;
        if !broadcasting && pending.is_empty() {
            return;
        }
        if broadcasting && now >= n * period {
            let truth = sc.cav.position_at(now);
            let msg = CavStateMessage {
                pos: apply_drift(truth, &cfg.cav.drift, now)
                    .expect("drifted altitude stays in range"),
                tx_timestamp_ms: now,
                gps_time_ms: now,
                ground_speed_mps: sc.cav.ground_speed_mps(now, 50),
            };
            let bytes = encode_cav_state(&msg).expect("trajectory positions are valid");
            let d = slant_distance_m(&truth, &sc.uav.position_at(now));
            let outcome = dsrc.transmit_at(d, now).expect("clock is monotonic");
            lock(&shared.ledger).insert((Hop::Dsrc, n), (now, None));
            if let Some(at) = outcome.arrival() {
                pending.push(Reverse((at, n, bytes)));
            }
            n += 1;
        }
        while let Some(Reverse((at, id, bytes))) = pending.peek().copied() {
            if at > now {
                break;
            }
            pending.pop();
            let rx = clock.now_ms();
            if let Some(entry) = lock(&shared.ledger).get_mut(&(Hop::Dsrc, id)) {
                entry.1 = Some(rx);
            }
            lock(&shared.chain).first_dsrc_rx_ms.get_or_insert(rx);
            let tx_ts = decode_cav_state(&bytes)
                .map(|m| m.tx_timestamp_ms)
                .unwrap_or_default();
            lock(&shared.udp_by_tx).insert(tx_ts, id);
            let sent = clock.now_ms();
            lock(&shared.ledger).insert((Hop::Udp, id), (sent, None));
            if let Err(e) = sock.send_to(&bytes, companion) {
                log::warn!("obu: udp send failed: {e}");
            }
        }
        thread::sleep(TICK);
    }
}

#[allow(clippy::too_many_arguments)]
fn companion_loop(
    sc: &Scenario,
    udp: UdpSocket,
    mut cmp: Option<CmpClient>,
    publisher: WsStream,
    source: SyntheticFrameSource,
    shared: &Shared,
    clock: &WallClock,
    stop: &AtomicBool,
) -> Result<(), String> {
    let cfg = &sc.config;
    udp.set_read_timeout(Some(Duration::from_millis(2)))
        .map_err(|e| e.to_string())?;
    let mut companion = Companion::new();
    let mut frames = FramePublisher::new(source);
    let mut sink = WsFrameSink::new(publisher);
    let mut next_compose = 0u64;
    let mut next_frame = cfg.frame_interval_ms;
    let mut buf = [0u8; 2048];
    while !stop.load(Ordering::SeqCst) {
        loop {
            match udp.recv_from(&mut buf) {
                Ok((n, _)) => {
                    let now = clock.now_ms();
                    let bytes = &buf[..n];
                    if let Ok(m) = decode_cav_state(bytes) {
                        if let Some(id) = lock(&shared.udp_by_tx).remove(&m.tx_timestamp_ms) {
                            if let Some(e) = lock(&shared.ledger).get_mut(&(Hop::Udp, id)) {
                                e.1 = Some(now);
                            }
                        }
                    }
                    if let Ok(IngestOutcome::Accepted) = companion.ingest_obu_datagram(bytes, now) {
                        lock(&shared.chain).first_udp_ingest_ms.get_or_insert(now);
                    }
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    break
                }
                Err(e) => return Err(format!("udp receive: {e}")),
            }
        }

        let now = clock.now_ms();
        if let Some(client) = cmp.as_mut() {
            if now >= next_compose {
                next_compose = now - now % cfg.compose_tick_ms + cfg.compose_tick_ms;
                let uav = sc.uav.position_at(now);
                if let Some(sys) = companion.compose_system_message(uav, now, cfg.cadence) {
                    let sent = clock.now_ms();
                    client
                        .send(&CmpFrame::System(sys))
                        .map_err(|e| format!("cmp send: {e}"))?;
                    push_cmp(shared, CmpKey::System(sys.msg_timestamp_ms), sent);
                }
                let before = companion.latched_zones().clone();
                if let Some(fault) = companion.check_incident(&cfg.zones, now) {
                    let zone = companion
                        .latched_zones()
                        .difference(&before)
                        .next()
                        .cloned()
                        .unwrap_or_default();
                    lock(&shared.chain).faults_raised.push(zone);
                    let sent = clock.now_ms();
                    client
                        .send(&CmpFrame::Fault(fault))
                        .map_err(|e| format!("cmp send: {e}"))?;
                    push_cmp(shared, CmpKey::Fault(fault.incident_time_ms), sent);
                }
            }
            // Acks and our own copy of any alert.
            while let Some(frame) = client
                .recv_timeout(Duration::from_millis(1))
                .map_err(|e| format!("cmp receive: {e}"))?
            {
                if let CmpFrame::Alert { alert_seq, .. } = frame {
                    lock(&shared.chain).alert_deliveries.push(AlertDelivery {
                        alert_seq,
                        client_id: COMPANION_ID.into(),
                        ts_ms: clock.now_ms(),
                    });
                }
            }
        }

        let now = clock.now_ms();
        if now >= next_frame && now <= cfg.duration_ms {
            next_frame += cfg.frame_interval_ms;
            match frames.publish(now, &mut sink) {
                Ok(_) => lock(&shared.chain).frames_published += 1,
                Err(e) => log::warn!("companion: {e}"),
            }
        }
        thread::sleep(Duration::from_millis(1));
    }
    sink.close();
    Ok(())
}

fn push_cmp(shared: &Shared, key: CmpKey, sent_ms: u64) {
    let mut v = lock(&shared.cmp_sent);
    let id = v.len() as u64 + 1;
    v.push((key, id, sent_ms));
}

fn observe(
    obs: usize,
    mut ws: WsStream,
    shared: &Shared,
    clock: &WallClock,
    stop: &AtomicBool,
    source: &SyntheticFrameSource,
) {
    while !stop.load(Ordering::SeqCst) {
        match ws.recv_message() {
            Ok(Some(Message::Binary(bytes))) => {
                let now = clock.now_ms();
                let ok = match decode_frame_packet(&bytes) {
                    Ok(pkt) => {
                        if obs == 0 {
                            lock(&shared.ledger)
                                .insert((Hop::Ws, pkt.frame_seq), (pkt.capture_ts_ms, Some(now)));
                        }
                        frame_digest(&pkt.payload) == frame_digest(&source.payload(pkt.frame_seq))
                    }
                    Err(_) => false,
                };
                let mut c = lock(&shared.chain);
                if ok {
                    c.frames_per_observer[obs] += 1;
                    c.first_frame_observed_ms.get_or_insert(now);
                } else {
                    c.digest_mismatches += 1;
                }
            }
            Ok(_) => {}
            Err(e) => {
                log::debug!("observer {obs}: {e}");
                return;
            }
        }
    }
    ws.close();
}

fn watch_alerts(
    mut client: CmpClient,
    name: &str,
    shared: &Shared,
    clock: &WallClock,
    stop: &AtomicBool,
) {
    while !stop.load(Ordering::SeqCst) {
        match client.recv_timeout(Duration::from_millis(20)) {
            Ok(Some(CmpFrame::Alert { alert_seq, .. })) => {
                lock(&shared.chain).alert_deliveries.push(AlertDelivery {
                    alert_seq,
                    client_id: name.into(),
                    ts_ms: clock.now_ms(),
                })
            }
            Ok(_) => {}
            Err(e) => {
                log::debug!("{name}: {e}");
                return;
            }
        }
    }
}

fn clamp(send: u64, recv: Option<u64>) -> Option<u64> {
    recv.map(|r| r.max(send + 1))
}

fn finish(sc: &Scenario, shared: &Shared, hub: Option<&CmpHub>, journal: Vec<u8>) -> RunOutput {
    let mut records: Vec<HopRecord> = lock(&shared.ledger)
        .iter()
        .filter(|((hop, _), _)| sc.hops().contains(hop))
        .map(|(&(hop, msg_id), &(send, recv))| HopRecord {
            hop,
            msg_id,
            send_ts_ms: send,
            recv_ts_ms: clamp(send, recv),
        })
        .collect();
    let mut chain = lock(&shared.chain).clone();

    if let Some(hub) = hub {
        let mut arrivals = BTreeMap::new();
        for r in hub.received() {
            match &r.frame {
                CmpFrame::System(m) => {
                    arrivals.insert(
                        CmpKey::System(m.msg_timestamp_ms).sort_key(),
                        r.received_ts_ms,
                    );
                    chain.system_at_cmp.push(SystemArrival {
                        recv_ts_ms: r.received_ts_ms,
                        msg: *m,
                    });
                }
                CmpFrame::Fault(f) => {
                    arrivals.insert(
                        CmpKey::Fault(f.incident_time_ms).sort_key(),
                        r.received_ts_ms,
                    );
                    chain.faults_at_cmp.push(r.received_ts_ms);
                }
                _ => {}
            }
        }
        for &(key, id, sent) in lock(&shared.cmp_sent).iter() {
            records.push(HopRecord {
                hop: Hop::CmpTcp,
                msg_id: id,
                send_ts_ms: sent,
                recv_ts_ms: clamp(sent, arrivals.get(&key.sort_key()).copied()),
            });
        }
    }
    records.sort_by_key(|r| (r.send_ts_ms, r.hop, r.msg_id));
    chain
        .alert_deliveries
        .sort_by(|a, b| (a.alert_seq, &a.client_id).cmp(&(b.alert_seq, &b.client_id)));

    let mut log = EventLog::default();
    for r in &records {
        log.push(
            r.send_ts_ms,
            LogEvent::Send {
                hop: r.hop,
                msg_id: r.msg_id,
            },
        );
        match r.recv_ts_ms {
            Some(rx) => log.push(
                rx,
                LogEvent::Deliver {
                    hop: r.hop,
                    msg_id: r.msg_id,
                    send_ts_ms: r.send_ts_ms,
                    latency_ms: rx - r.send_ts_ms,
                },
            ),
            None => log.push(
                r.send_ts_ms,
                LogEvent::Drop {
                    hop: r.hop,
                    msg_id: r.msg_id,
                },
            ),
        }
    }
    for a in &chain.alert_deliveries {
        log.push(
            a.ts_ms,
            LogEvent::AlertDelivered {
                alert_seq: a.alert_seq,
                client_id: &a.client_id,
            },
        );
    }

    let report = summarize(&records, Some(sc.hops()));
    RunOutput {
        records,
        report,
        events: log.buf,
        cmp_journal: journal,
        chain,
    }
}

impl CmpKey {
    fn sort_key(self) -> (u8, u64) {
        match self {
            CmpKey::System(t) => (0, t),
            CmpKey::Fault(t) => (1, t),
        }
    }
}
