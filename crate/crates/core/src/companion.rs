//! The relay's companion computer: ingest CAV fixes from the OBU, compose
//! position reports and incident alerts for the CMP, and publish camera
//! frames.
//!
//! Everything here is a plain state machine driven by explicit timestamps, so
//! the same code runs under the simulator and behind real sockets.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::surface_distance_m;
use crate::wire::{
    decode_cav_state, CavStateMessage, FaultMessage, FramePacket, IncidentType, SystemMessage,
    WireError, NO_FIX_AGE,
};
use crate::GeoPosition;

pub const DEFAULT_ZONE_RADIUS_M: f64 = 30.0;
pub const FRAME_RING_CAPACITY: usize = 32;

fn default_radius() -> f64 {
    DEFAULT_ZONE_RADIUS_M
}

/// Geofence around a known incident location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentZone {
    pub id: String,
    pub center: GeoPosition,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
    pub incident_type: IncidentType,
}

impl IncidentZone {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(format!("zone {:?}: radius_m must be > 0", self.id));
        }
        Ok(())
    }
}

/// Emission window for System Messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cadence {
    pub min_interval_ms: u64,
    pub max_interval_ms: u64,
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            min_interval_ms: 1000,
            max_interval_ms: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    /// Older than or equal to the fix already held.
    Stale,
}

/// Counters for the OBU ingest path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub stale: u64,
    /// Decode failures keyed by error class.
    pub decode_errors: BTreeMap<&'static str, u64>,
}

impl IngestStats {
    pub fn total_decode_errors(&self) -> u64 {
        self.decode_errors.values().sum()
    }
}

fn error_class(e: &WireError) -> &'static str {
    match e {
        WireError::FrameTruncated { .. } => "frame_truncated",
        WireError::BadMagic => "bad_magic",
        WireError::UnsupportedVersion(_) => "unsupported_version",
        WireError::WrongMessageType(_) => "wrong_message_type",
        WireError::ChecksumMismatch { .. } => "checksum_mismatch",
        WireError::OutOfRange(_) => "out_of_range",
        _ => "other",
    }
}

#[derive(Debug, Clone, Default)]
pub struct Companion {
    last_cav: Option<(CavStateMessage, u64)>,
    /// A fix arrived after the last System Message went out.
    fresh_fix: bool,
    last_system_sent_ms: Option<u64>,
    latches: BTreeSet<String>,
    stats: IngestStats,
}

impl Companion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Latest accepted fix and the time it was received.
    pub fn last_cav(&self) -> Option<&(CavStateMessage, u64)> {
        self.last_cav.as_ref()
    }

    pub fn last_system_sent_ms(&self) -> Option<u64> {
        self.last_system_sent_ms
    }

    pub fn latched_zones(&self) -> &BTreeSet<String> {
        &self.latches
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    /// Handles one datagram from the OBU. Newest transmit timestamp wins;
    /// duplicates and reordered older fixes are counted and dropped. Decode
    /// errors leave the state untouched.
    pub fn ingest_obu_datagram(
        &mut self,
        bytes: &[u8],
        recv_ts_ms: u64,
    ) -> Result<IngestOutcome, WireError> {
        let msg = match decode_cav_state(bytes) {
            Ok(m) => m,
            Err(e) => {
                *self.stats.decode_errors.entry(error_class(&e)).or_default() += 1;
                return Err(e);
            }
        };
        if let Some((held, _)) = &self.last_cav {
            if msg.tx_timestamp_ms <= held.tx_timestamp_ms {
                self.stats.stale += 1;
                return Ok(IngestOutcome::Stale);
            }
        }
        self.last_cav = Some((msg, recv_ts_ms));
        self.fresh_fix = true;
        self.stats.accepted += 1;
        Ok(IngestOutcome::Accepted)
    }

    /// Emits a System Message when the cadence allows: after `min_interval_ms`
    /// if a new fix arrived since the last one, otherwise after
    /// `max_interval_ms`. The first call always emits.
    pub fn compose_system_message(
        &mut self,
        uav_pos: GeoPosition,
        now_ms: u64,
        cadence: Cadence,
    ) -> Option<SystemMessage> {
        if let Some(last) = self.last_system_sent_ms {
            if now_ms <= last {
                return None;
            }
            let gap = now_ms - last;
            let due = (self.fresh_fix && gap >= cadence.min_interval_ms)
                || gap >= cadence.max_interval_ms;
            if !due {
                return None;
            }
        }
        let (cav_pos, cav_age_ms) = match &self.last_cav {
            Some((m, recv)) => (Some(m.pos), now_ms.saturating_sub(*recv) as i64),
            None => (None, NO_FIX_AGE),
        };
        self.last_system_sent_ms = Some(now_ms);
        self.fresh_fix = false;
        Some(SystemMessage {
            msg_timestamp_ms: now_ms,
            cav_pos,
            uav_pos,
            cav_age_ms,
        })
    }

    /// Fires the first unlatched zone the latest fix lies inside, then latches it.
    pub fn check_incident(&mut self, zones: &[IncidentZone], now_ms: u64) -> Option<FaultMessage> {
        let (cav, _) = self.last_cav.as_ref()?;
        let zone = zones.iter().find(|z| {
            !self.latches.contains(&z.id) && surface_distance_m(&cav.pos, &z.center) <= z.radius_m
        })?;
        self.latches.insert(zone.id.clone());
        Some(FaultMessage {
            incident_pos: zone.center,
            incident_time_ms: now_ms,
            incident_type: zone.incident_type,
        })
    }
}

/// Deterministic stand-in for the camera: seeded pseudo-image bytes whose
/// first eight bytes carry the frame sequence number.
#[derive(Debug, Clone)]
pub struct SyntheticFrameSource {
    seed: u64,
    payload_len: usize,
}

impl SyntheticFrameSource {
    pub fn new(seed: u64, payload_len: usize) -> Self {
        SyntheticFrameSource {
            seed,
            payload_len: payload_len.max(8),
        }
    }

    pub fn payload(&self, frame_seq: u64) -> Vec<u8> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ frame_seq.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut buf = vec![0u8; self.payload_len];
        rng.fill_bytes(&mut buf);
        buf[..8].copy_from_slice(&frame_seq.to_be_bytes());
        buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("frame socket not connected")]
pub struct NotConnected;

/// Where published frames go: the WebSocket publisher in live mode, the
/// simulated hop otherwise.
pub trait FrameSink {
    fn send_frame(&mut self, pkt: &FramePacket) -> Result<(), NotConnected>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PublishError {
    #[error("frame socket not connected; {buffered} frame(s) buffered")]
    NotConnected { buffered: usize },
}

/// Numbers frames, buffers them while the socket is down (oldest evicted
/// past [`FRAME_RING_CAPACITY`]) and flushes the backlog in order on the next
/// successful send.
#[derive(Debug, Clone)]
pub struct FramePublisher {
    source: SyntheticFrameSource,
    next_seq: u64,
    ring: VecDeque<FramePacket>,
    evicted: u64,
}

impl FramePublisher {
    pub fn new(source: SyntheticFrameSource) -> Self {
        FramePublisher {
            source,
            next_seq: 1,
            ring: VecDeque::with_capacity(FRAME_RING_CAPACITY),
            evicted: 0,
        }
    }

    /// Frames waiting for the socket, oldest first.
    pub fn buffered(&self) -> impl Iterator<Item = &FramePacket> {
        self.ring.iter()
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Captures a frame stamped `now_ms` and tries to deliver it, together
    /// with any backlog. Returns the new frame's sequence number.
    pub fn publish(&mut self, now_ms: u64, sink: &mut dyn FrameSink) -> Result<u64, PublishError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        // Drain the backlog first so a reconnect does not evict the oldest frame.
        let _ = self.flush(sink);
        if self.ring.len() == FRAME_RING_CAPACITY {
            self.ring.pop_front();
            self.evicted += 1;
        }
        self.ring.push_back(FramePacket {
            frame_seq: seq,
            capture_ts_ms: now_ms,
            payload: self.source.payload(seq),
        });
        self.flush(sink)?;
        Ok(seq)
    }

    /// Sends buffered frames in order until the sink refuses one.
    pub fn flush(&mut self, sink: &mut dyn FrameSink) -> Result<(), PublishError> {
        while let Some(front) = self.ring.front() {
            if sink.send_frame(front).is_err() {
                return Err(PublishError::NotConnected {
                    buffered: self.ring.len(),
                });
            }
            self.ring.pop_front();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode_cav_state;
    use proptest::prelude::*;

    fn base() -> GeoPosition {
        GeoPosition::new(40.0, -83.0, 275.0).unwrap()
    }

    fn fix(pos: GeoPosition, tx: u64) -> [u8; 56] {
        encode_cav_state(&CavStateMessage {
            pos,
            tx_timestamp_ms: tx,
            gps_time_ms: tx,
            ground_speed_mps: 3.0,
        })
        .unwrap()
    }

    fn zone(id: &str, center: GeoPosition) -> IncidentZone {
        IncidentZone {
            id: id.into(),
            center,
            radius_m: 30.0,
            incident_type: IncidentType::Accident,
        }
    }

    #[test]
    fn ingest_first_fix_and_newest_wins() {
        let mut c = Companion::new();
        assert_eq!(
            c.ingest_obu_datagram(&fix(base(), 500), 510),
            Ok(IngestOutcome::Accepted)
        );
        assert_eq!(c.last_cav().unwrap().0.tx_timestamp_ms, 500);
        assert_eq!(
            c.ingest_obu_datagram(&fix(base(), 400), 520),
            Ok(IngestOutcome::Stale)
        );
        assert_eq!(
            c.ingest_obu_datagram(&fix(base(), 500), 530),
            Ok(IngestOutcome::Stale)
        );
        assert_eq!(c.last_cav().unwrap().1, 510);
        assert_eq!(c.stats().stale, 2);
    }

    #[test]
    fn truncated_datagram_is_counted() {
        let mut c = Companion::new();
        let f = fix(base(), 500);
        assert!(matches!(
            c.ingest_obu_datagram(&f[..55], 10),
            Err(WireError::FrameTruncated { .. })
        ));
        assert!(c.last_cav().is_none());
        assert_eq!(c.stats().decode_errors["frame_truncated"], 1);
    }

    #[test]
    fn cadence_gating() {
        let mut c = Companion::new();
        let uav = base().with_alt(305.0).unwrap();
        let cad = Cadence::default();
        // First call with no fix emits the sentinel.
        let first = c.compose_system_message(uav, 10_000, cad).unwrap();
        assert_eq!((first.cav_pos, first.cav_age_ms), (None, NO_FIX_AGE));
        c.ingest_obu_datagram(&fix(base(), 10_100), 10_200).unwrap();
        assert!(c.compose_system_message(uav, 10_500, cad).is_none());
        let m = c.compose_system_message(uav, 11_200, cad).unwrap();
        assert_eq!(m.cav_pos, Some(base()));
        assert_eq!(m.uav_pos, uav);
        assert_eq!(m.cav_age_ms, 1000);
        assert_eq!(m.msg_timestamp_ms, 11_200);
    }

    #[test]
    fn max_interval_without_fresh_fix() {
        let mut c = Companion::new();
        let uav = base();
        let cad = Cadence::default();
        c.ingest_obu_datagram(&fix(base(), 100), 100).unwrap();
        c.compose_system_message(uav, 1000, cad).unwrap();
        // No new fix: 1 s is not enough, 2 s is.
        assert!(c.compose_system_message(uav, 2000, cad).is_none());
        let m = c.compose_system_message(uav, 3000, cad).unwrap();
        assert_eq!(m.cav_age_ms, 2900);
    }

    #[test]
    fn sixty_second_run_gaps_within_window() {
        let mut c = Companion::new();
        let cad = Cadence::default();
        let mut emitted = Vec::new();
        for t in (0..60_000u64).step_by(100) {
            c.ingest_obu_datagram(&fix(base(), t + 1), t + 5).unwrap();
            if let Some(m) = c.compose_system_message(base(), t + 50, cad) {
                emitted.push(m.msg_timestamp_ms);
            }
        }
        assert!(emitted.len() >= 59);
        for w in emitted.windows(2) {
            let gap = w[1] - w[0];
            assert!((1000..=2000).contains(&gap), "gap {gap}");
        }
    }

    #[test]
    fn incident_trigger_and_latch() {
        let center = base();
        let zones = [zone("z1", center)];
        let mut c = Companion::new();
        assert!(c.check_incident(&zones, 1).is_none(), "no fix yet");

        c.ingest_obu_datagram(&fix(center.offset_m(500.0, 0.0).unwrap(), 1), 2)
            .unwrap();
        assert!(c.check_incident(&zones, 3).is_none());

        c.ingest_obu_datagram(&fix(center.offset_m(12.0, 0.0).unwrap(), 4), 5)
            .unwrap();
        let f = c.check_incident(&zones, 6).unwrap();
        assert_eq!(f.incident_pos, center);
        assert_eq!(f.incident_time_ms, 6);
        assert_eq!(f.incident_type, IncidentType::Accident);

        c.ingest_obu_datagram(&fix(center.offset_m(500.0, 0.0).unwrap(), 7), 8)
            .unwrap();
        c.ingest_obu_datagram(&fix(center, 9), 10).unwrap();
        assert!(c.check_incident(&zones, 11).is_none());
    }

    #[test]
    fn first_matching_zone_wins_one_per_call() {
        let center = base();
        let zones = [
            zone("a", center),
            zone("b", center.offset_m(5.0, 0.0).unwrap()),
        ];
        let mut c = Companion::new();
        c.ingest_obu_datagram(&fix(center, 1), 1).unwrap();
        assert!(c.check_incident(&zones, 2).is_some());
        assert!(c.latched_zones().contains("a"));
        assert!(c.check_incident(&zones, 3).is_some());
        assert!(c.latched_zones().contains("b"));
        assert!(c.check_incident(&zones, 4).is_none());
    }

    #[derive(Default)]
    struct TestSink {
        connected: bool,
        got: Vec<u64>,
    }

    impl FrameSink for TestSink {
        fn send_frame(&mut self, pkt: &FramePacket) -> Result<(), NotConnected> {
            if !self.connected {
                return Err(NotConnected);
            }
            self.got.push(pkt.frame_seq);
            Ok(())
        }
    }

    #[test]
    fn frame_seq_counts_up() {
        let mut p = FramePublisher::new(SyntheticFrameSource::new(1, 64));
        let mut s = TestSink {
            connected: true,
            ..Default::default()
        };
        let seqs: Vec<u64> = (0..3)
            .map(|t| p.publish(t * 1000, &mut s).unwrap())
            .collect();
        assert_eq!(seqs, [1, 2, 3]);
        assert_eq!(s.got, [1, 2, 3]);
    }

    #[test]
    fn ring_keeps_newest_32_and_flushes_in_order() {
        let mut p = FramePublisher::new(SyntheticFrameSource::new(1, 64));
        let mut s = TestSink::default();
        for t in 0..40 {
            assert!(matches!(
                p.publish(t, &mut s),
                Err(PublishError::NotConnected { .. })
            ));
        }
        let held: Vec<u64> = p.buffered().map(|f| f.frame_seq).collect();
        assert_eq!(held, (9..=40).collect::<Vec<_>>());
        assert_eq!(p.evicted(), 8);

        s.connected = true;
        p.publish(41, &mut s).unwrap();
        assert_eq!(s.got, (9..=41).collect::<Vec<_>>());
        assert_eq!(p.buffered().count(), 0);
    }

    #[test]
    fn synthetic_payload_is_deterministic_and_tagged() {
        let src = SyntheticFrameSource::new(42, 1024);
        assert_eq!(src.payload(7), src.payload(7));
        assert_ne!(src.payload(7), src.payload(8));
        assert_eq!(&src.payload(7)[..8], &7u64.to_be_bytes());
    }

    proptest! {
        #[test]
        fn held_tx_timestamp_never_decreases(txs in prop::collection::vec(1u64..10_000, 1..100)) {
            let mut c = Companion::new();
            let mut held = 0;
            for (i, tx) in txs.into_iter().enumerate() {
                c.ingest_obu_datagram(&fix(base(), tx), i as u64).unwrap();
                let now = c.last_cav().unwrap().0.tx_timestamp_ms;
                prop_assert!(now >= held);
                held = now;
            }
        }

        #[test]
        fn corruptions_are_all_counted(flips in prop::collection::vec((0usize..56, 0u8..8), 0..50)) {
            let mut c = Companion::new();
            let mut injected = 0;
            for (i, (byte, bit)) in flips.iter().enumerate() {
                let tx = 1 + i as u64 * 2;
                c.ingest_obu_datagram(&fix(base(), tx), tx).unwrap();
                let mut bad = fix(base(), tx + 1);
                bad[*byte] ^= 1 << bit;
                prop_assert!(c.ingest_obu_datagram(&bad, tx + 1).is_err());
                injected += 1;
            }
            prop_assert_eq!(c.stats().total_decode_errors(), injected);
            prop_assert_eq!(c.stats().accepted, flips.len() as u64);
        }

        #[test]
        fn zone_fires_at_most_once(path in prop::collection::vec((-60.0f64..60.0, -60.0f64..60.0), 1..200)) {
            let zones = [zone("z", base())];
            let mut c = Companion::new();
            let mut fired = 0;
            for (i, (n, e)) in path.into_iter().enumerate() {
                let p = base().offset_m(n, e).unwrap();
                c.ingest_obu_datagram(&fix(p, 1 + i as u64), i as u64).unwrap();
                fired += c.check_incident(&zones, i as u64).is_some() as u32;
            }
            prop_assert!(fired <= 1);
        }

        #[test]
        fn system_timestamps_respect_min_interval(ticks in prop::collection::vec(1u64..700, 1..200), fixes in prop::collection::vec(any::<bool>(), 200)) {
            let mut c = Companion::new();
            let mut t = 0;
            let mut last: Option<u64> = None;
            for (i, dt) in ticks.into_iter().enumerate() {
                t += dt;
                if fixes[i] {
                    c.ingest_obu_datagram(&fix(base(), t), t).unwrap();
                }
                if let Some(m) = c.compose_system_message(base(), t, Cadence::default()) {
                    if let Some(l) = last {
                        prop_assert!(m.msg_timestamp_ms >= l + 1000);
                    }
                    last = Some(m.msg_timestamp_ms);
                }
            }
        }
    }
}
