//! Single-threaded discrete-event run of a scenario.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AlertDelivery, ChainLog, EventLog, LogEvent, RunOutput, SharedBuf, SystemArrival};
use crate::airlink::{Channel, DeliveryOutcome};
use crate::cmp::{CmpHub, ConnId};
use crate::companion::{
    Companion, FramePublisher, FrameSink, IngestOutcome, NotConnected, SyntheticFrameSource,
};
use crate::framesock::{decode_frame, encode_frame, frame_digest, Opcode, Side};
use crate::geo::slant_distance_m;
use crate::metrics::{summarize, Hop, Recorder};
use crate::scenario::{apply_drift, Scenario};
use crate::wire::{
    decode_frame_packet, encode_cav_state, encode_frame_packet, CavStateMessage, CmpFrame,
    FramePacket, CAV_FRAME_LEN,
};

pub(super) const COMPANION_ID: &str = "uav-1";

/// Event payloads. Arrivals sort before ticks at the same instant so a
/// compose tick sees every fix that landed on that millisecond.
enum Ev {
    DsrcArrive { id: u64, bytes: [u8; CAV_FRAME_LEN] },
    UdpArrive { id: u64, bytes: [u8; CAV_FRAME_LEN] },
    CmpArrive { id: u64, frame: CmpFrame },
    WsArrive { seq: u64, wire: Vec<u8> },
    Broadcast { n: u64 },
    Compose { k: u64 },
    FrameTick { k: u64 },
}

impl Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::DsrcArrive { .. } => 0,
            Ev::UdpArrive { .. } => 1,
            Ev::CmpArrive { .. } => 2,
            Ev::WsArrive { .. } => 3,
            Ev::Broadcast { .. } => 4,
            Ev::Compose { .. } => 5,
            Ev::FrameTick { .. } => 6,
        }
    }
}

struct Queued {
    ts: u64,
    rank: u8,
    seq: u64,
    ev: Ev,
}

impl Queued {
    fn key(&self) -> (u64, u8, u64) {
        (self.ts, self.rank, self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap pops the largest, we want the earliest.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Queued>,
    next_seq: u64,
}

impl Queue {
    fn push(&mut self, ts: u64, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued {
            ts,
            rank: ev.rank(),
            seq,
            ev,
        });
    }

    fn pop(&mut self) -> Option<(u64, Ev)> {
        self.heap.pop().map(|q| (q.ts, q.ev))
    }
}

#[derive(Default)]
struct Collect(Vec<FramePacket>);

impl FrameSink for Collect {
    fn send_frame(&mut self, pkt: &FramePacket) -> Result<(), NotConnected> {
        self.0.push(pkt.clone());
        Ok(())
    }
}

struct Sim<'a> {
    sc: &'a Scenario,
    q: Queue,
    channels: BTreeMap<Hop, Channel>,
    rec: Recorder,
    log: EventLog,
    chain: ChainLog,
    companion: Companion,
    hub: CmpHub,
    companion_conn: ConnId,
    client_names: BTreeMap<ConnId, String>,
    next_cmp_id: u64,
    publisher: FramePublisher,
    published_digests: BTreeMap<u64, [u8; 32]>,
    mask_rng: ChaCha8Rng,
}

/// Runs `sc` to completion. The output depends only on the scenario.
pub fn simulate(sc: &Scenario) -> RunOutput {
    let cfg = &sc.config;
    let journal = SharedBuf::default();
    let mut hub = CmpHub::new(cfg.staleness_horizon_ms).with_journal(Box::new(journal.clone()));
    let mut log = EventLog::default();
    let mut client_names = BTreeMap::new();
    let mut companion_conn = 0;
    if sc.has_cmp() {
        let names = std::iter::once(COMPANION_ID.to_string())
            .chain((1..=cfg.cmp_clients).map(|i| format!("ops-{i}")));
        for (i, name) in names.enumerate() {
            let conn = hub.connect();
            hub.handle_record(
                conn,
                CmpFrame::Hello {
                    client_id: name.clone(),
                },
                0,
            )
            .expect("fresh connection registers");
            log.push(0, LogEvent::Hello { client_id: &name });
            if i == 0 {
                companion_conn = conn;
            }
            client_names.insert(conn, name);
        }
    }
    let channels = sc
        .hops()
        .iter()
        .map(|&h| {
            (
                h,
                Channel::new(sc.channel_params(h)).expect("validated params"),
            )
        })
        .collect();
    let ws_seed = sc.hop_seed(Hop::Ws);
    let mut sim = Sim {
        sc,
        q: Queue::default(),
        channels,
        rec: Recorder::new(),
        log,
        chain: ChainLog {
            connected_clients: client_names.len(),
            zones: if sc.has_cmp() { cfg.zones.len() } else { 0 },
            frames_per_observer: vec![0; cfg.observers],
            ..ChainLog::default()
        },
        companion: Companion::new(),
        hub,
        companion_conn,
        client_names,
        next_cmp_id: 1,
        publisher: FramePublisher::new(SyntheticFrameSource::new(ws_seed, cfg.frame_payload_bytes)),
        published_digests: BTreeMap::new(),
        mask_rng: ChaCha8Rng::seed_from_u64(ws_seed ^ 0x6d61_736b),
    };

    let period = cfg.broadcast_period_ms();
    if period <= cfg.duration_ms {
        sim.q.push(period, Ev::Broadcast { n: 1 });
    }
    if sc.has_cmp() {
        sim.q.push(0, Ev::Compose { k: 0 });
    }
    if cfg.frame_interval_ms <= cfg.duration_ms {
        sim.q.push(cfg.frame_interval_ms, Ev::FrameTick { k: 1 });
    }
    while let Some((t, ev)) = sim.q.pop() {
        sim.step(t, ev);
    }

    let records = sim.rec.records();
    let report = summarize(&records, Some(sc.hops()));
    RunOutput {
        records,
        report,
        events: sim.log.buf,
        cmp_journal: journal.take(),
        chain: sim.chain,
    }
}

impl Sim<'_> {
    fn distance(&self, t: u64) -> f64 {
        slant_distance_m(&self.sc.cav.position_at(t), &self.sc.uav.position_at(t))
    }

    /// Sends message `id` on `hop` at `t`; logs and records the outcome.
    fn transmit(&mut self, hop: Hop, id: u64, t: u64) -> Option<u64> {
        let d = self.distance(t);
        let ch = self.channels.get_mut(&hop).expect("hop is wired");
        let outcome = ch
            .transmit_at(d, t)
            .expect("events are processed in time order");
        self.log.push(t, LogEvent::Send { hop, msg_id: id });
        let arrival = outcome.arrival();
        self.rec
            .record(hop, id, t, arrival)
            .expect("ids are unique per hop");
        match outcome {
            DeliveryOutcome::Delivered { arrival_ts_ms } => self.log.push(
                arrival_ts_ms,
                LogEvent::Deliver {
                    hop,
                    msg_id: id,
                    send_ts_ms: t,
                    latency_ms: arrival_ts_ms - t,
                },
            ),
            DeliveryOutcome::Dropped => self.log.push(t, LogEvent::Drop { hop, msg_id: id }),
        }
        arrival
    }

    fn step(&mut self, t: u64, ev: Ev) {
        let cfg = &self.sc.config;
        match ev {
            Ev::Broadcast { n } => {
                let truth = self.sc.cav.position_at(t);
                let msg = CavStateMessage {
                    pos: apply_drift(truth, &cfg.cav.drift, t)
                        .expect("drifted altitude stays in range"),
                    tx_timestamp_ms: t,
                    gps_time_ms: t,
                    ground_speed_mps: self.sc.cav.ground_speed_mps(t, 50),
                };
                let bytes = encode_cav_state(&msg).expect("trajectory positions are valid");
                if let Some(at) = self.transmit(Hop::Dsrc, n, t) {
                    self.q.push(at, Ev::DsrcArrive { id: n, bytes });
                }
                let next = (n + 1) * cfg.broadcast_period_ms();
                if next <= cfg.duration_ms {
                    self.q.push(next, Ev::Broadcast { n: n + 1 });
                }
            }
            Ev::DsrcArrive { id, bytes } => {
                self.chain.first_dsrc_rx_ms.get_or_insert(t);
                // The OBU forwards every received frame straight to the companion.
                if let Some(at) = self.transmit(Hop::Udp, id, t) {
                    self.q.push(at, Ev::UdpArrive { id, bytes });
                }
            }
            Ev::UdpArrive { id, bytes } => {
                let outcome = match self.companion.ingest_obu_datagram(&bytes, t) {
                    Ok(IngestOutcome::Accepted) => {
                        self.chain.first_udp_ingest_ms.get_or_insert(t);
                        "accepted"
                    }
                    Ok(IngestOutcome::Stale) => "stale",
                    Err(_) => "decode_error",
                };
                self.log.push(
                    t,
                    LogEvent::Ingest {
                        msg_id: id,
                        outcome,
                    },
                );
            }
            Ev::Compose { k } => {
                let uav = self.sc.uav.position_at(t);
                if let Some(sys) = self.companion.compose_system_message(uav, t, cfg.cadence) {
                    let id = self.next_cmp_id();
                    self.log.push(
                        t,
                        LogEvent::SystemComposed {
                            msg_id: id,
                            cav_age_ms: sys.cav_age_ms,
                        },
                    );
                    self.send_cmp(id, CmpFrame::System(sys), t);
                }
                let before = self.companion.latched_zones().clone();
                if let Some(fault) = self.companion.check_incident(&cfg.zones, t) {
                    let zone = self
                        .companion
                        .latched_zones()
                        .difference(&before)
                        .next()
                        .cloned()
                        .unwrap_or_default();
                    let id = self.next_cmp_id();
                    self.log.push(
                        t,
                        LogEvent::FaultRaised {
                            msg_id: id,
                            zone_id: &zone,
                        },
                    );
                    self.chain.faults_raised.push(zone);
                    self.send_cmp(id, CmpFrame::Fault(fault), t);
                }
                let next = (k + 1) * cfg.compose_tick_ms;
                if next <= cfg.duration_ms {
                    self.q.push(next, Ev::Compose { k: k + 1 });
                }
            }
            Ev::CmpArrive { id, frame } => self.cmp_arrive(id, frame, t),
            Ev::FrameTick { k } => {
                let mut sink = Collect::default();
                self.publisher
                    .publish(t, &mut sink)
                    .expect("the simulated sink never refuses");
                for pkt in sink.0 {
                    let bytes = encode_frame_packet(&pkt).expect("payload within limit");
                    self.published_digests
                        .insert(pkt.frame_seq, frame_digest(&pkt.payload));
                    self.log.push(
                        t,
                        LogEvent::FramePublished {
                            frame_seq: pkt.frame_seq,
                        },
                    );
                    self.chain.frames_published += 1;
                    let mut mask = [0u8; 4];
                    self.mask_rng.fill_bytes(&mut mask);
                    let wire = encode_frame(true, Opcode::Binary, &bytes, Some(mask));
                    if let Some(at) = self.transmit(Hop::Ws, pkt.frame_seq, t) {
                        self.q.push(
                            at,
                            Ev::WsArrive {
                                seq: pkt.frame_seq,
                                wire,
                            },
                        );
                    }
                }
                let next = (k + 1) * cfg.frame_interval_ms;
                if next <= cfg.duration_ms {
                    self.q.push(next, Ev::FrameTick { k: k + 1 });
                }
            }
            Ev::WsArrive { seq, wire } => self.ws_arrive(seq, &wire, t),
        }
    }

    fn next_cmp_id(&mut self) -> u64 {
        let id = self.next_cmp_id;
        self.next_cmp_id += 1;
        id
    }

    fn send_cmp(&mut self, id: u64, frame: CmpFrame, t: u64) {
        if let Some(at) = self.transmit(Hop::CmpTcp, id, t) {
            self.q.push(at, Ev::CmpArrive { id, frame });
        }
    }

    fn cmp_arrive(&mut self, id: u64, frame: CmpFrame, t: u64) {
        let kind = frame.kind();
        if let CmpFrame::System(m) = &frame {
            self.chain.system_at_cmp.push(SystemArrival {
                recv_ts_ms: t,
                msg: *m,
            });
        }
        if matches!(frame, CmpFrame::Fault(_)) {
            self.chain.faults_at_cmp.push(t);
        }
        let out = self
            .hub
            .handle_record(self.companion_conn, frame, t)
            .expect("companion is registered");
        self.log.push(t, LogEvent::CmpAccepted { msg_id: id, kind });
        for o in out {
            if let CmpFrame::Alert { alert_seq, .. } = o.frame {
                let client_id = self.client_names[&o.to].clone();
                self.log.push(
                    t,
                    LogEvent::AlertDelivered {
                        alert_seq,
                        client_id: &client_id,
                    },
                );
                self.chain.alert_deliveries.push(AlertDelivery {
                    alert_seq,
                    client_id,
                    ts_ms: t,
                });
            }
        }
    }

    /// The relay unmasks the publisher's frame and copies it, unmasked, to
    /// every observer; each observer decodes and checks the digest.
    fn ws_arrive(&mut self, seq: u64, wire: &[u8], t: u64) {
        let Ok(Some((frame, _))) = decode_frame(wire, Side::Server) else {
            return;
        };
        let relayed = encode_frame(true, Opcode::Binary, &frame.payload, None);
        let expected = self.published_digests.remove(&seq);
        for obs in 0..self.sc.config.observers {
            let got = decode_frame(&relayed, Side::Client)
                .ok()
                .flatten()
                .and_then(|(f, _)| decode_frame_packet(&f.payload).ok());
            let ok = match (&got, expected) {
                (Some(pkt), Some(d)) => pkt.frame_seq == seq && frame_digest(&pkt.payload) == d,
                _ => false,
            };
            if ok {
                self.chain.frames_per_observer[obs] += 1;
                self.chain.first_frame_observed_ms.get_or_insert(t);
            } else {
                self.chain.digest_mismatches += 1;
            }
            self.log.push(
                t,
                LogEvent::FrameObserved {
                    frame_seq: seq,
                    observer: obs,
                    digest_ok: ok,
                },
            );
        }
    }
}
