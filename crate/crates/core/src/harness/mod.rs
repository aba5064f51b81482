//! Runs experiments end to end and writes their artifacts.
//!
//! [`run`] executes a preset in simulation or on loopback sockets and writes
//! `events.jsonl`, `records.csv`, `report.json`, `report.csv`,
//! `cmp_journal.jsonl` and `manifest.json` into the output directory.
//! [`quick_clear`] does the same for the incident demo and additionally
//! checks every link of the relay chain. [`analyze`] rebuilds a report from a
//! raw records CSV.

mod live;
mod sim;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::metrics::{
    read_records_csv, summarize, write_records_csv, write_report_json, write_summary_csv, Hop,
    HopRecord, LatencyReport, MetricsError,
};
use crate::scenario::{build_experiment, ConfigError, Preset, Scenario, ScenarioConfig};
use crate::wire::SystemMessage;

pub use live::run_live;
pub use sim::simulate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Sim,
    Live,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sim" => Ok(Mode::Sim),
            "live" => Ok(Mode::Live),
            _ => Err(format!("unknown mode {s:?} (expected sim or live)")),
        }
    }
}

/// Port overrides; `None` keeps the config value. Port 0 picks a free port.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortMap {
    pub udp: Option<u16>,
    pub cmp: Option<u16>,
    pub ws: Option<u16>,
}

/// What to run and where to put the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: Preset,
    pub mode: Mode,
    /// Overrides the config seed when set.
    pub seed: Option<u64>,
    /// Overrides the config duration when set.
    pub duration_ms: Option<u64>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ports: PortMap,
}

impl RunManifest {
    pub fn new(preset: Preset, mode: Mode, out_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            preset,
            mode,
            seed: None,
            duration_ms: None,
            config: None,
            out_dir: out_dir.into(),
            ports: PortMap::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_duration_ms(mut self, ms: u64) -> Self {
        self.duration_ms = Some(ms);
        self
    }

    pub fn with_config(mut self, path: impl Into<PathBuf>) -> Self {
        self.config = Some(path.into());
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{endpoint} port {port} is already in use")]
    PortInUse { endpoint: &'static str, port: u16 },
    #[error("quick clear chain broken at {stage}")]
    ChainBroken {
        stage: Stage,
        transcript: Box<Transcript>,
    },
    #[error("live run failed: {0}")]
    Live(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Everything a run produced, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<HopRecord>,
    pub report: LatencyReport,
    /// JSON lines, one per event.
    pub events: Vec<u8>,
    pub cmp_journal: Vec<u8>,
    pub chain: ChainLog,
}

/// Observations the Quick Clear checks are evaluated against.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChainLog {
    pub first_dsrc_rx_ms: Option<u64>,
    pub first_udp_ingest_ms: Option<u64>,
    pub system_at_cmp: Vec<SystemArrival>,
    /// Zone ids in the order their faults were raised.
    pub faults_raised: Vec<String>,
    pub faults_at_cmp: Vec<u64>,
    pub alert_deliveries: Vec<AlertDelivery>,
    /// Registered CMP clients, the companion included.
    pub connected_clients: usize,
    pub zones: usize,
    pub frames_published: u64,
    pub frames_per_observer: Vec<u64>,
    pub digest_mismatches: u64,
    pub first_frame_observed_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemArrival {
    pub recv_ts_ms: u64,
    pub msg: SystemMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlertDelivery {
    pub alert_seq: u64,
    pub client_id: String,
    pub ts_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Dsrc,
    Udp,
    CmpSystem,
    Fault,
    Alert,
    Frames,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Dsrc,
        Stage::Udp,
        Stage::CmpSystem,
        Stage::Fault,
        Stage::Alert,
        Stage::Frames,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dsrc => "DSRC",
            Stage::Udp => "UDP",
            Stage::CmpSystem => "CMP_SYSTEM",
            Stage::Fault => "FAULT",
            Stage::Alert => "ALERT",
            Stage::Frames => "FRAMES",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageStatus {
    Green {
        first_success_ms: u64,
    },
    #[serde(rename = "N/A")]
    NotApplicable,
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub stage: Stage,
    #[serde(flatten)]
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub preset: Preset,
    pub mode: Mode,
    pub stages: Vec<StageResult>,
}

impl Transcript {
    pub fn first_failure(&self) -> Option<Stage> {
        self.stages
            .iter()
            .find(|s| matches!(s.status, StageStatus::Failed { .. }))
            .map(|s| s.stage)
    }

    pub fn status(&self, stage: Stage) -> &StageStatus {
        &self
            .stages
            .iter()
            .find(|s| s.stage == stage)
            .unwrap()
            .status
    }

    /// One line per stage, for the terminal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let line = match &s.status {
                StageStatus::Green { first_success_ms } => format!(
                    "{:<11} ok   first at {first_success_ms} ms",
                    s.stage.as_str()
                ),
                StageStatus::NotApplicable => format!("{:<11} n/a", s.stage.as_str()),
                StageStatus::Failed { reason } => format!("{:<11} FAIL {reason}", s.stage.as_str()),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// A fix counts as fresh when it is younger than the cadence's max interval.
fn is_fresh(m: &SystemMessage, max_interval_ms: u64) -> bool {
    m.cav_pos.is_some() && m.cav_age_ms >= 0 && (m.cav_age_ms as u64) <= max_interval_ms
}

/// Checks each link of the relay chain against the observations.
pub fn evaluate_chain(
    preset: Preset,
    mode: Mode,
    config: &ScenarioConfig,
    chain: &ChainLog,
) -> Transcript {
    use StageStatus::*;
    let fail = |r: String| Failed { reason: r };

    let dsrc = match chain.first_dsrc_rx_ms {
        Some(t) => Green {
            first_success_ms: t,
        },
        None => fail("no CAV broadcast reached the OBU".into()),
    };
    let udp = match chain.first_udp_ingest_ms {
        Some(t) => Green {
            first_success_ms: t,
        },
        None => fail("companion accepted no fix over UDP".into()),
    };

    let arrivals = &chain.system_at_cmp;
    let cmp = if arrivals.len() < 2 {
        fail(format!(
            "{} System Message(s) reached the CMP, need at least 2",
            arrivals.len()
        ))
    } else {
        let bad = arrivals
            .windows(2)
            .filter(|w| is_fresh(&w[1].msg, config.cadence.max_interval_ms))
            .map(|w| w[1].recv_ts_ms.saturating_sub(w[0].recv_ts_ms))
            .find(|gap| !(1000..=2000).contains(gap));
        match bad {
            Some(gap) => fail(format!("System Message gap {gap} ms outside [1000, 2000]")),
            None => Green {
                first_success_ms: arrivals[0].recv_ts_ms,
            },
        }
    };

    let (fault, alert) = if chain.zones == 0 {
        (NotApplicable, NotApplicable)
    } else {
        let mut ids = chain.faults_raised.clone();
        ids.sort();
        ids.dedup();
        let fault = if ids.len() != chain.faults_raised.len() {
            fail("a zone raised more than one FaultMessage".into())
        } else if chain.faults_at_cmp.len() != chain.zones {
            fail(format!(
                "{} FaultMessage(s) reached the CMP for {} zone(s)",
                chain.faults_at_cmp.len(),
                chain.zones
            ))
        } else {
            Green {
                first_success_ms: chain.faults_at_cmp[0],
            }
        };
        let alert = if chain.faults_at_cmp.is_empty() {
            fail("no alert was raised".into())
        } else {
            let mut bad = None;
            for seq in 1..=chain.faults_at_cmp.len() as u64 {
                let n = chain
                    .alert_deliveries
                    .iter()
                    .filter(|a| a.alert_seq == seq)
                    .count();
                if n != chain.connected_clients {
                    bad = Some(format!(
                        "alert {seq} reached {n} of {} connected client(s)",
                        chain.connected_clients
                    ));
                    break;
                }
            }
            match bad {
                Some(r) => fail(r),
                None => Green {
                    first_success_ms: chain
                        .alert_deliveries
                        .iter()
                        .map(|a| a.ts_ms)
                        .min()
                        .unwrap(),
                },
            }
        };
        (fault, alert)
    };

    let frames = if chain.digest_mismatches > 0 {
        fail(format!(
            "{} frame(s) arrived with a different digest",
            chain.digest_mismatches
        ))
    } else if chain.frames_per_observer.is_empty() || chain.frames_per_observer.contains(&0) {
        fail(format!(
            "observers received {:?} frames",
            chain.frames_per_observer
        ))
    } else {
        Green {
            first_success_ms: chain.first_frame_observed_ms.unwrap_or(0),
        }
    };

    let stages = Stage::ALL
        .into_iter()
        .zip([dsrc, udp, cmp, fault, alert, frames])
        .map(|(stage, status)| StageResult { stage, status })
        .collect();
    Transcript {
        preset,
        mode,
        stages,
    }
}

/// Reads the optional config file over `base`, then applies manifest
/// overrides. Nothing is written here.
pub fn load_config(
    manifest: &RunManifest,
    base: ScenarioConfig,
) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = match &manifest.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                ConfigError::new(".", format!("cannot read {}: {e}", path.display()))
            })?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::new(".", e.to_string()))?;
            if !value.is_object() {
                return Err(ConfigError::new(".", "config must be a JSON object"));
            }
            base.merged_with(&value)?
        }
        None => base,
    };
    if let Some(seed) = manifest.seed {
        cfg.seed = seed;
    }
    if let Some(d) = manifest.duration_ms {
        cfg.duration_ms = d;
    }
    let p = manifest.ports;
    cfg.ports.udp = p.udp.unwrap_or(cfg.ports.udp);
    cfg.ports.cmp = p.cmp.unwrap_or(cfg.ports.cmp);
    cfg.ports.ws = p.ws.unwrap_or(cfg.ports.ws);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(
    scenario: &Scenario,
    mode: Mode,
    stop_when_chain_complete: bool,
) -> Result<RunOutput, HarnessError> {
    match mode {
        Mode::Sim => Ok(simulate(scenario)),
        Mode::Live => run_live(scenario, stop_when_chain_complete),
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: LatencyReport,
    pub out_dir: PathBuf,
}

pub fn run(manifest: &RunManifest) -> Result<RunSummary, HarnessError> {
    let cfg = load_config(manifest, ScenarioConfig::preset(manifest.preset))?;
    let scenario = build_experiment(manifest.preset, cfg)?;
    let started = unix_ms();
    let output = execute(&scenario, manifest.mode, false)?;
    write_artifacts(manifest, &scenario, &output, started)?;
    Ok(RunSummary {
        report: output.report,
        out_dir: manifest.out_dir.clone(),
    })
}

/// Runs the incident demo and checks the whole chain. The transcript is
/// written to `transcript.json` whether or not the chain holds.
pub fn quick_clear(manifest: &RunManifest) -> Result<Transcript, HarnessError> {
    if !manifest.preset.has_cmp() {
        return Err(ConfigError::new(
            "preset",
            format!("{} has no CMP hop; quick clear needs one", manifest.preset),
        )
        .into());
    }
    let cfg = load_config(manifest, ScenarioConfig::quick_clear(manifest.preset))?;
    let scenario = build_experiment(manifest.preset, cfg)?;
    let started = unix_ms();
    let output = execute(&scenario, manifest.mode, true)?;
    let transcript = evaluate_chain(
        manifest.preset,
        manifest.mode,
        &scenario.config,
        &output.chain,
    );
    write_artifacts(manifest, &scenario, &output, started)?;
    write_json(&manifest.out_dir.join("transcript.json"), &transcript)?;
    match transcript.first_failure() {
        Some(stage) => Err(HarnessError::ChainBroken {
            stage,
            transcript: Box::new(transcript),
        }),
        None => Ok(transcript),
    }
}

/// Rebuilds the summary from a raw records CSV and, when `out` is given,
/// writes it there as CSV (or JSON when the extension is `.json`).
pub fn analyze(records: &Path, out: Option<&Path>) -> Result<LatencyReport, HarnessError> {
    let file = File::open(records)?;
    let recs = read_records_csv(io::BufReader::new(file))?;
    let report = summarize(&recs, None);
    if let Some(out) = out {
        let w = BufWriter::new(File::create(out)?);
        if out.extension().is_some_and(|e| e == "json") {
            write_report_json(&report, w)?;
        } else {
            write_summary_csv(&report, w)?;
        }
    }
    Ok(report)
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Serialize)]
struct ManifestEcho<'a> {
    manifest: &'a RunManifest,
    config: &'a ScenarioConfig,
    hops: &'a [Hop],
    /// Wall-clock fields live only here so every other artifact stays reproducible.
    wall_clock: WallClockInfo,
}

#[derive(Serialize)]
struct WallClockInfo {
    started_unix_ms: u64,
    finished_unix_ms: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_artifacts(
    manifest: &RunManifest,
    scenario: &Scenario,
    out: &RunOutput,
    started: u64,
) -> Result<(), HarnessError> {
    let dir = &manifest.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("events.jsonl"), &out.events)?;
    fs::write(dir.join("cmp_journal.jsonl"), &out.cmp_journal)?;
    write_records_csv(
        &out.records,
        BufWriter::new(File::create(dir.join("records.csv"))?),
    )?;
    write_summary_csv(
        &out.report,
        BufWriter::new(File::create(dir.join("report.csv"))?),
    )?;
    write_report_json(
        &out.report,
        BufWriter::new(File::create(dir.join("report.json"))?),
    )?;
    write_json(
        &dir.join("manifest.json"),
        &ManifestEcho {
            manifest,
            config: &scenario.config,
            hops: scenario.hops(),
            wall_clock: WallClockInfo {
                started_unix_ms: started,
                finished_unix_ms: unix_ms(),
            },
        },
    )
}

/// In-memory writer handed to the CMP hub as its journal.
#[derive(Clone, Default)]
pub(crate) struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub(crate) fn take(&self) -> Vec<u8> {
        std::mem::take(&mut *self.0.lock().unwrap())
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Line-oriented event log with a fixed key order per event kind.
#[derive(Serialize)]
struct LogLine<'a> {
    ts_ms: u64,
    #[serde(flatten)]
    event: LogEvent<'a>,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEvent<'a> {
    Hello {
        client_id: &'a str,
    },
    Send {
        hop: Hop,
        msg_id: u64,
    },
    Deliver {
        hop: Hop,
        msg_id: u64,
        send_ts_ms: u64,
        latency_ms: u64,
    },
    Drop {
        hop: Hop,
        msg_id: u64,
    },
    Ingest {
        msg_id: u64,
        outcome: &'a str,
    },
    SystemComposed {
        msg_id: u64,
        cav_age_ms: i64,
    },
    FaultRaised {
        msg_id: u64,
        zone_id: &'a str,
    },
    CmpAccepted {
        msg_id: u64,
        kind: &'a str,
    },
    AlertDelivered {
        alert_seq: u64,
        client_id: &'a str,
    },
    FramePublished {
        frame_seq: u64,
    },
    FrameObserved {
        frame_seq: u64,
        observer: usize,
        digest_ok: bool,
    },
}

#[derive(Default)]
struct EventLog {
    buf: Vec<u8>,
}

impl EventLog {
    fn push(&mut self, ts_ms: u64, event: LogEvent<'_>) {
        serde_json::to_writer(&mut self.buf, &LogLine { ts_ms, event }).expect("event serializes");
        self.buf.push(b'\n');
    }
}
