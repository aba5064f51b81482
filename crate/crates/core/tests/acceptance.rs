//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test --test acceptance`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quickclear::airlink::{Channel, ChannelParams, DeliveryOutcome};
use quickclear::framesock::{
    accept_key, decode_frame, encode_frame, FrameServer, Opcode, Side, WsError, WsStream,
};
use quickclear::harness::{
    quick_clear, run, simulate, ChainLog, HarnessError, Mode, RunManifest, StageStatus,
};
use quickclear::metrics::{Hop, LatencyReport};
use quickclear::scenario::{build_experiment, Preset, ScenarioConfig, DYNAMIC_COUPLING_MS_PER_M};
use quickclear::wire::{
    decode_cav_state, decode_cmp_record, decode_frame_packet, encode_cav_state, encode_cmp_record,
    encode_frame_packet, CavStateMessage, CmpDecode, CmpDecoder, CmpFrame, FaultMessage,
    FramePacket, IncidentType, SystemMessage, CAV_FRAME_LEN,
};
use quickclear::GeoPosition;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if let false = $cond {
            return Err(format!($($fmt)+));
        }
    };
}

// Pinned tolerances.
const CODEC_SAMPLES: usize = 10_000;
const FUZZ_SAMPLES: usize = 100_000;
const CODEC_BUDGET: Duration = Duration::from_secs(30);
const DROP_BAND: (f64, f64) = (0.185, 0.215);
const RECOVERY_TOLERANCE: f64 = 0.10;
const MIN_MESSAGES_PER_HOP: u64 = 500;
const EXP2_BUDGET: Duration = Duration::from_secs(60);
const LIVE_BUDGET: Duration = Duration::from_secs(60);
const MIN_FRAMES: u64 = 1000;

fn rand_pos(rng: &mut ChaCha8Rng) -> GeoPosition {
    GeoPosition::new(
        rng.random_range(-90.0..=90.0),
        rng.random_range(-180.0..=180.0),
        rng.random_range(-500.0..9000.0),
    )
    .unwrap()
}

fn rand_cav(rng: &mut ChaCha8Rng) -> CavStateMessage {
    CavStateMessage {
        pos: rand_pos(rng),
        tx_timestamp_ms: rng.random_range(1..u64::MAX),
        gps_time_ms: rng.random_range(1..u64::MAX),
        ground_speed_mps: rng.random_range(0.0..80.0),
    }
}

fn rand_system(rng: &mut ChaCha8Rng) -> SystemMessage {
    let fix = rng.random_bool(0.8);
    SystemMessage {
        msg_timestamp_ms: rng.random_range(0..1u64 << 53),
        cav_pos: fix.then(|| rand_pos(rng)),
        uav_pos: rand_pos(rng),
        cav_age_ms: if fix {
            rng.random_range(0..1i64 << 40)
        } else {
            -1
        },
    }
}

fn rand_fault(rng: &mut ChaCha8Rng) -> FaultMessage {
    FaultMessage {
        incident_pos: rand_pos(rng),
        incident_time_ms: rng.random_range(0..1u64 << 53),
        incident_type: IncidentType::ALL[rng.random_range(0..3)],
    }
}

fn rand_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..40);
    (0..n).map(|_| rng.random_range('a'..='z')).collect()
}

fn cmp_round_trip(f: &CmpFrame) -> Result<(), String> {
    let bytes = encode_cmp_record(f).map_err(|e| e.to_string())?;
    match decode_cmp_record(&bytes) {
        Ok(CmpDecode::Record { frame, consumed }) if frame == *f && consumed == bytes.len() => {
            Ok(())
        }
        other => Err(format!("{f:?} came back as {other:?}")),
    }
}

fn criterion_1_codecs() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for _ in 0..CODEC_SAMPLES {
        let m = rand_cav(&mut rng);
        let b = encode_cav_state(&m).map_err(|e| e.to_string())?;
        ensure!(
            decode_cav_state(&b).as_ref() == Ok(&m),
            "CAV round trip failed for {m:?}"
        );
    }
    for _ in 0..CODEC_SAMPLES {
        cmp_round_trip(&CmpFrame::System(rand_system(&mut rng)))?;
        cmp_round_trip(&CmpFrame::Fault(rand_fault(&mut rng)))?;
        cmp_round_trip(&CmpFrame::Hello {
            client_id: rand_text(&mut rng),
        })?;
        cmp_round_trip(&CmpFrame::Ack { seq: rng.random() })?;
        let fault = rand_fault(&mut rng);
        cmp_round_trip(&CmpFrame::Alert {
            alert_seq: rng.random(),
            fault,
        })?;
        cmp_round_trip(&CmpFrame::Error {
            reason: rand_text(&mut rng),
        })?;
        let mut payload = vec![0u8; rng.random_range(0..512)];
        rng.fill_bytes(&mut payload);
        let p = FramePacket {
            frame_seq: rng.random(),
            capture_ts_ms: rng.random(),
            payload,
        };
        let b = encode_frame_packet(&p).map_err(|e| e.to_string())?;
        ensure!(
            decode_frame_packet(&b).as_ref() == Ok(&p),
            "frame packet round trip failed"
        );
    }

    // Fuzz: random strings plus mutated valid encodings. Panics are caught by
    // the runner and reported as a failure.
    let valid_cav = encode_cav_state(&rand_cav(&mut rng)).unwrap();
    let valid_cmp = encode_cmp_record(&CmpFrame::System(rand_system(&mut rng))).unwrap();
    let mut decoder = CmpDecoder::new();
    for i in 0..FUZZ_SAMPLES {
        let buf: Vec<u8> = match i % 3 {
            0 => {
                let mut b = vec![0u8; rng.random_range(0..200)];
                rng.fill_bytes(&mut b);
                b
            }
            1 => {
                let mut b = valid_cav.to_vec();
                for _ in 0..rng.random_range(1..4) {
                    let k = rng.random_range(0..b.len());
                    b[k] = rng.random();
                }
                b.truncate(rng.random_range(0..=b.len()));
                b
            }
            _ => {
                let mut b = valid_cmp.clone();
                let k = rng.random_range(0..b.len());
                b[k] = rng.random();
                b
            }
        };
        let _ = decode_cav_state(&buf);
        let _ = decode_cmp_record(&buf);
        let _ = decode_frame_packet(&buf);
        let _ = decode_frame(&buf, Side::Server);
        let _ = decode_frame(&buf, Side::Client);
        decoder.push(&buf);
        while decoder.next_frame().is_some() {}
    }

    let frame = encode_cav_state(&rand_cav(&mut rng)).unwrap();
    let mut detected = 0;
    for bit in 0..CAV_FRAME_LEN * 8 {
        let mut b = frame;
        b[bit / 8] ^= 1 << (bit % 8);
        if decode_cav_state(&b).is_err() {
            detected += 1;
        }
    }
    ensure!(
        detected == 448,
        "only {detected}/448 single-bit flips detected"
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < CODEC_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{CODEC_SAMPLES} round trips x 8 kinds, {FUZZ_SAMPLES} fuzz inputs, 448/448 flips, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2_channel() -> Outcome {
    let params = ChannelParams {
        base_latency_ms: 30.0,
        jitter_ms: 0.0,
        p_base: 0.2,
        d0_m: 300.0,
        dmax_m: 1000.0,
        latency_per_m: 0.0,
        seed: 2024,
    };
    let mut ch = Channel::new(params).unwrap();
    let mut dropped = 0u32;
    for t in 0..5000u64 {
        match ch.transmit_at(250.0, t).map_err(|e| e.to_string())? {
            DeliveryOutcome::Dropped => dropped += 1,
            DeliveryOutcome::Delivered { arrival_ts_ms } => {
                ensure!(
                    arrival_ts_ms - t == 30,
                    "zero-jitter latency {} != 30",
                    arrival_ts_ms - t
                )
            }
        }
    }
    let frac = dropped as f64 / 5000.0;
    ensure!(
        (DROP_BAND.0..=DROP_BAND.1).contains(&frac),
        "drop fraction {frac}"
    );
    Ok(format!(
        "drop fraction {frac:.4}, every delivered latency = 30 ms"
    ))
}

fn sim_report(preset: Preset, config: ScenarioConfig) -> LatencyReport {
    simulate(&build_experiment(preset, config).unwrap()).report
}

fn mean(r: &LatencyReport, hop: Hop) -> f64 {
    r.hop(hop).and_then(|h| h.mean_ms).unwrap_or(f64::NAN)
}

fn criterion_3_exp2_recovery() -> Outcome {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::preset(Preset::Exp2);
    cfg.duration_ms = 600_000;
    ensure!(
        cfg.hops.udp.base_latency_ms == 8000.0,
        "preset UDP base is {}",
        cfg.hops.udp.base_latency_ms
    );
    ensure!(
        cfg.hops.cmp_tcp.base_latency_ms == 500.0,
        "preset CMP base is {}",
        cfg.hops.cmp_tcp.base_latency_ms
    );
    let r = sim_report(Preset::Exp2, cfg);
    ensure!(r.hops.len() == 4, "{} hop rows", r.hops.len());
    for h in &r.hops {
        ensure!(
            h.count_received >= MIN_MESSAGES_PER_HOP,
            "{} received only {}",
            h.hop,
            h.count_received
        );
    }
    let (udp, cmp) = (mean(&r, Hop::Udp), mean(&r, Hop::CmpTcp));
    ensure!(
        (udp - 8000.0).abs() <= RECOVERY_TOLERANCE * 8000.0,
        "UDP mean {udp}"
    );
    ensure!(
        (cmp - 500.0).abs() <= RECOVERY_TOLERANCE * 500.0,
        "CMP mean {cmp}"
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < EXP2_BUDGET, "took {elapsed:?}");
    let min_n = r.hops.iter().map(|h| h.count_received).min().unwrap();
    Ok(format!(
        "UDP mean {udp:.0} ms, CMP mean {cmp:.0} ms, 4 rows, >= {min_n} msgs/hop, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_4_exp1_ordering() -> Outcome {
    let sc = build_experiment(Preset::Exp1, ScenarioConfig::preset(Preset::Exp1)).unwrap();
    ensure!(
        !sc.hops().contains(&Hop::CmpTcp),
        "EXP1 wiring includes the CMP hop"
    );
    let r = simulate(&sc).report;
    ensure!(r.hop(Hop::CmpTcp).is_none(), "EXP1 report has a CMP row");
    let (d, w, u) = (mean(&r, Hop::Dsrc), mean(&r, Hop::Ws), mean(&r, Hop::Udp));
    ensure!(
        d < w && w < u,
        "ordering violated: DSRC {d}, WS {w}, UDP {u}"
    );
    Ok(format!(
        "DSRC {d:.1} < WS {w:.1} < UDP {u:.1} ms, no CMP hop"
    ))
}

fn criterion_5_dynamic() -> Outcome {
    let dynamic = sim_report(
        Preset::Exp2Dynamic,
        ScenarioConfig::preset(Preset::Exp2Dynamic),
    );

    // Stationary run under the same distance coupling.
    let mut coupled = ScenarioConfig::preset(Preset::Exp2);
    for (hop, k) in DYNAMIC_COUPLING_MS_PER_M {
        coupled.hops.get_mut(hop).latency_per_m = k;
    }
    let stationary_coupled = sim_report(Preset::Exp2, coupled);
    let stationary = sim_report(Preset::Exp2, ScenarioConfig::preset(Preset::Exp2));
    let mut lines = Vec::new();
    for hop in Hop::ALL {
        let (dy, sc, s0) = (
            mean(&dynamic, hop),
            mean(&stationary_coupled, hop),
            mean(&stationary, hop),
        );
        ensure!(dy >= sc, "{hop}: dynamic {dy} < stationary (coupled) {sc}");
        ensure!(dy >= s0, "{hop}: dynamic {dy} < stationary {s0}");
        lines.push(format!("{hop} {dy:.0}>={sc:.0}"));
    }

    let mut uncoupled = ScenarioConfig::preset(Preset::Exp2Dynamic);
    for hop in Hop::ALL {
        uncoupled.hops.get_mut(hop).latency_per_m = 0.0;
    }
    let dynamic_uncoupled = sim_report(Preset::Exp2Dynamic, uncoupled);
    ensure!(
        dynamic_uncoupled == stationary,
        "uncoupled dynamic statistics differ from stationary"
    );
    Ok(format!("{}; identical when uncoupled", lines.join(", ")))
}

fn check_chain(chain: &ChainLog, clients: usize, max_interval_ms: u64) -> Result<String, String> {
    let mut zones = chain.faults_raised.clone();
    zones.sort();
    zones.dedup();
    ensure!(
        zones.len() == chain.faults_raised.len() && chain.faults_raised.len() == chain.zones,
        "faults raised {:?} for {} zone(s)",
        chain.faults_raised,
        chain.zones
    );
    ensure!(
        chain.faults_at_cmp.len() == chain.zones,
        "{} faults reached the CMP",
        chain.faults_at_cmp.len()
    );
    ensure!(
        chain.connected_clients == clients,
        "{} connected clients",
        chain.connected_clients
    );
    for seq in 1..=chain.zones as u64 {
        let n = chain
            .alert_deliveries
            .iter()
            .filter(|a| a.alert_seq == seq)
            .count();
        ensure!(
            n == clients,
            "alert {seq} delivered {n} times for {clients} clients"
        );
    }
    let gaps: Vec<u64> = chain
        .system_at_cmp
        .windows(2)
        .filter(|w| {
            w[1].msg.cav_pos.is_some()
                && (0..=max_interval_ms as i64).contains(&w[1].msg.cav_age_ms)
        })
        .map(|w| w[1].recv_ts_ms - w[0].recv_ts_ms)
        .collect();
    ensure!(!gaps.is_empty(), "no System Message gaps with a fresh fix");
    let (lo, hi) = (*gaps.iter().min().unwrap(), *gaps.iter().max().unwrap());
    ensure!(
        lo >= 1000 && hi <= 2000,
        "System Message gaps span [{lo}, {hi}] ms"
    );
    Ok(format!("{} gaps in [{lo}, {hi}] ms", gaps.len()))
}

fn criterion_6_quick_clear() -> Outcome {
    let cfg = ScenarioConfig::quick_clear(Preset::Exp2Dynamic);
    let clients = 1 + cfg.cmp_clients;
    let max_interval = cfg.cadence.max_interval_ms;
    let sc = build_experiment(Preset::Exp2Dynamic, cfg).unwrap();
    let chain = simulate(&sc).chain;
    let gaps = check_chain(&chain, clients, max_interval)?;
    ensure!(
        chain.frames_published >= MIN_FRAMES,
        "only {} frames published",
        chain.frames_published
    );
    ensure!(
        chain.digest_mismatches == 0,
        "{} digest mismatches",
        chain.digest_mismatches
    );
    ensure!(
        chain
            .frames_per_observer
            .iter()
            .all(|&n| n == chain.frames_published),
        "observers got {:?} of {} frames",
        chain.frames_per_observer,
        chain.frames_published
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = RunManifest::new(Preset::Exp2Dynamic, Mode::Sim, dir.path());
    let t = quick_clear(&manifest).map_err(|e| e.to_string())?;
    ensure!(t.first_failure().is_none(), "transcript:\n{}", t.render());
    Ok(format!(
        "{} fault/zone, alert to {clients}/{clients} clients, {gaps}, {} frames x {} observers hash-equal",
        chain.faults_raised.len() / chain.zones.max(1),
        chain.frames_published,
        chain.frames_per_observer.len()
    ))
}

fn criterion_7_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for preset in [Preset::Exp1, Preset::Exp2, Preset::Exp2Dynamic] {
        let mut bytes = Vec::new();
        for run_no in 0..2 {
            let out = dir.path().join(format!("{preset}-{run_no}"));
            run(&RunManifest::new(preset, Mode::Sim, &out).with_seed(42))
                .map_err(|e| e.to_string())?;
            let events = fs::read(out.join("events.jsonl")).map_err(|e| e.to_string())?;
            let records = fs::read(out.join("records.csv")).map_err(|e| e.to_string())?;
            bytes.push((events, records));
        }
        ensure!(bytes[0].0 == bytes[1].0, "{preset}: events.jsonl differs");
        ensure!(bytes[0].1 == bytes[1].1, "{preset}: records.csv differs");
        ensure!(!bytes[0].0.is_empty(), "{preset}: empty event log");
    }
    Ok("events.jsonl and records.csv byte-identical for exp1, exp2, exp2-dynamic".into())
}

fn criterion_8_live() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut m = RunManifest::new(Preset::Exp2Dynamic, Mode::Live, dir.path());
    m.ports.udp = Some(0);
    m.ports.cmp = Some(0);
    m.ports.ws = Some(0);
    let start = Instant::now();
    let t = match quick_clear(&m) {
        Ok(t) => t,
        Err(HarnessError::ChainBroken { transcript, .. }) => {
            return Err(format!("chain broken:\n{}", transcript.render()))
        }
        Err(e) => return Err(e.to_string()),
    };
    let elapsed = start.elapsed();
    ensure!(elapsed < LIVE_BUDGET, "took {elapsed:?}");
    ensure!(
        t.stages
            .iter()
            .all(|s| matches!(s.status, StageStatus::Green { .. })),
        "{}",
        t.render()
    );
    Ok(format!(
        "all 6 stages green on loopback in {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_9_websocket() -> Outcome {
    let key = accept_key("dGhlIHNhbXBsZSBub25jZQ==").map_err(|e| e.to_string())?;
    ensure!(key == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=", "accept key {key}");

    let srv = FrameServer::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let mut ws = WsStream::connect(srv.local_addr(), "/publish").map_err(|e| e.to_string())?;
    ws.set_read_timeout(Some(Duration::from_secs(5)))
        .map_err(|e| e.to_string())?;
    ws.writer_mut()
        .send_raw(&encode_frame(true, Opcode::Binary, b"unmasked", None))
        .map_err(|e| e.to_string())?;
    let code = loop {
        match ws.recv_message() {
            Ok(Some(_)) => continue,
            Ok(None) => return Err("no close frame within 5 s".into()),
            Err(WsError::ConnectionClosed(code)) => break code,
            Err(e) => return Err(e.to_string()),
        }
    };
    ensure!(code == Some(1002), "close status {code:?}");
    Ok("accept key matches the worked example; unmasked client frame closed with 1002".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 codec round trip, fuzz, bit flips", criterion_1_codecs),
        (
            "2 channel drop fraction and zero-jitter latency",
            criterion_2_channel,
        ),
        (
            "3 EXP2 configured-value recovery",
            criterion_3_exp2_recovery,
        ),
        ("4 EXP1 latency ordering", criterion_4_exp1_ordering),
        ("5 dynamic motion raises latency", criterion_5_dynamic),
        ("6 Quick Clear chain", criterion_6_quick_clear),
        ("7 SIM determinism", criterion_7_determinism),
        ("8 live loopback Quick Clear", criterion_8_live),
        ("9 WebSocket conformance", criterion_9_websocket),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
