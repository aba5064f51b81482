//! Per-hop timing records and the latency/drop report built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// A measured communication leg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hop {
    #[serde(rename = "DSRC")]
    Dsrc,
    #[serde(rename = "UDP")]
    Udp,
    #[serde(rename = "WS")]
    Ws,
    #[serde(rename = "CMP_TCP")]
    CmpTcp,
}

impl Hop {
    pub const ALL: [Hop; 4] = [Hop::Dsrc, Hop::Udp, Hop::Ws, Hop::CmpTcp];

    pub fn as_str(self) -> &'static str {
        match self {
            Hop::Dsrc => "DSRC",
            Hop::Udp => "UDP",
            Hop::Ws => "WS",
            Hop::CmpTcp => "CMP_TCP",
        }
    }
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Hop {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Hop::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| format!("unknown hop {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HopRecord {
    pub hop: Hop,
    pub msg_id: u64,
    pub send_ts_ms: u64,
    /// `None` when the message was dropped on this hop.
    pub recv_ts_ms: Option<u64>,
}

impl HopRecord {
    pub fn latency_ms(&self) -> Option<u64> {
        self.recv_ts_ms.map(|r| r - self.send_ts_ms)
    }

    fn sort_key(&self) -> (u64, Hop, u64) {
        (self.send_ts_ms, self.hop, self.msg_id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("duplicate record for {hop} message {msg_id}")]
    DuplicateRecord { hop: Hop, msg_id: u64 },
    #[error("{hop} message {msg_id}: receive time {recv} is not after send time {send}")]
    CausalityViolation {
        hop: Hop,
        msg_id: u64,
        send: u64,
        recv: u64,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Collects hop records, rejecting duplicates and acausal samples.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    records: BTreeMap<(Hop, u64), HopRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        hop: Hop,
        msg_id: u64,
        send_ts_ms: u64,
        recv_ts_ms: Option<u64>,
    ) -> Result<(), MetricsError> {
        if let Some(recv) = recv_ts_ms {
            if recv <= send_ts_ms {
                return Err(MetricsError::CausalityViolation {
                    hop,
                    msg_id,
                    send: send_ts_ms,
                    recv,
                });
            }
        }
        if self.records.contains_key(&(hop, msg_id)) {
            return Err(MetricsError::DuplicateRecord { hop, msg_id });
        }
        self.records.insert(
            (hop, msg_id),
            HopRecord {
                hop,
                msg_id,
                send_ts_ms,
                recv_ts_ms,
            },
        );
        Ok(())
    }

    pub fn insert(&mut self, r: HopRecord) -> Result<(), MetricsError> {
        self.record(r.hop, r.msg_id, r.send_ts_ms, r.recv_ts_ms)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records ordered by (send time, hop, message id).
    pub fn records(&self) -> Vec<HopRecord> {
        let mut v: Vec<HopRecord> = self.records.values().copied().collect();
        v.sort_by_key(HopRecord::sort_key);
        v
    }
}

/// Statistics for one hop. Latency fields are `None` when nothing arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopSummary {
    pub hop: Hop,
    pub count_sent: u64,
    pub count_received: u64,
    pub drop_pct: f64,
    pub mean_ms: Option<f64>,
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub min_ms: Option<f64>,
    pub max_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub hops: Vec<HopSummary>,
}

impl LatencyReport {
    pub fn hop(&self, hop: Hop) -> Option<&HopSummary> {
        self.hops.iter().find(|h| h.hop == hop)
    }
}

/// Mean of an ascending slice. Summing in sorted order keeps the result
/// independent of how the samples were originally ordered.
pub fn mean<T: Float>(sorted: &[T]) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let sum = sorted.iter().fold(T::zero(), |acc, &x| acc + x);
    Some(sum / T::from(sorted.len()).unwrap())
}

/// Median of an ascending slice; the two middle values are averaged for even lengths.
pub fn median<T: Float>(sorted: &[T]) -> Option<T> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => {
            let two = T::one() + T::one();
            Some((sorted[n / 2 - 1] + sorted[n / 2]) / two)
        }
    }
}

/// Nearest-rank percentile of an ascending slice, `q` in (0, 1].
pub fn percentile_nearest_rank<T: Float>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn summarize_hop(hop: Hop, records: &[&HopRecord]) -> HopSummary {
    let mut lat: Vec<f64> = records
        .iter()
        .filter_map(|r| r.latency_ms())
        .map(|l| l as f64)
        .collect();
    lat.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sent = records.len() as u64;
    let received = lat.len() as u64;
    let drop_pct = if sent == 0 {
        0.0
    } else {
        100.0 * (sent - received) as f64 / sent as f64
    };
    HopSummary {
        hop,
        count_sent: sent,
        count_received: received,
        drop_pct,
        mean_ms: mean(&lat),
        median_ms: median(&lat),
        p95_ms: percentile_nearest_rank(&lat, 0.95),
        min_ms: lat.first().copied(),
        max_ms: lat.last().copied(),
    }
}

/// Aggregates records per hop. With `hops` given, exactly those hops are
/// reported in that order (absent ones as zeroed rows); otherwise every hop
/// present in `records`, in canonical order.
pub fn summarize(records: &[HopRecord], hops: Option<&[Hop]>) -> LatencyReport {
    let mut by_hop: BTreeMap<Hop, Vec<&HopRecord>> = BTreeMap::new();
    for r in records {
        by_hop.entry(r.hop).or_default().push(r);
    }
    let wanted: Vec<Hop> = match hops {
        Some(h) => h.to_vec(),
        None => by_hop.keys().copied().collect(),
    };
    LatencyReport {
        hops: wanted
            .into_iter()
            .map(|h| summarize_hop(h, by_hop.get(&h).map(Vec::as_slice).unwrap_or(&[])))
            .collect(),
    }
}

pub const RECORDS_HEADER: [&str; 5] = ["hop", "msg_id", "send_ts_ms", "recv_ts_ms", "latency_ms"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "hop",
    "count_sent",
    "count_received",
    "drop_pct",
    "mean_ms",
    "median_ms",
    "p95_ms",
    "min_ms",
    "max_ms",
];

fn csv_err(e: csv::Error) -> MetricsError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MetricsError::Io(io),
        other => MetricsError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Raw records, one row each, sorted by (send time, hop, message id).
pub fn write_records_csv<W: Write>(records: &[HopRecord], w: W) -> Result<(), MetricsError> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(HopRecord::sort_key);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RECORDS_HEADER).map_err(csv_err)?;
    for r in &sorted {
        out.write_record([
            r.hop.as_str().to_string(),
            r.msg_id.to_string(),
            r.send_ts_ms.to_string(),
            opt(r.recv_ts_ms),
            opt(r.latency_ms()),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per hop.
pub fn write_summary_csv<W: Write>(report: &LatencyReport, w: W) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for h in &report.hops {
        out.write_record([
            h.hop.as_str().to_string(),
            h.count_sent.to_string(),
            h.count_received.to_string(),
            h.drop_pct.to_string(),
            opt(h.mean_ms),
            opt(h.median_ms),
            opt(h.p95_ms),
            opt(h.min_ms),
            opt(h.max_ms),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_json<W: Write>(report: &LatencyReport, mut w: W) -> Result<(), MetricsError> {
    serde_json::to_writer_pretty(&mut w, report).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn parse_field<T: FromStr>(field: &str, name: &str, line: u64) -> Result<T, MetricsError>
where
    T::Err: fmt::Display,
{
    field.parse().map_err(|e| MetricsError::Parse {
        line,
        message: format!("{name}: {e}"),
    })
}

/// Reads a raw-records CSV. Errors name the 1-based file line (header is line 1).
pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<HopRecord>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RECORDS_HEADER) {
        return Err(MetricsError::Parse {
            line: 1,
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rec = Recorder::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let hop: Hop = parse_field(&row[0], "hop", line)?;
        let msg_id: u64 = parse_field(&row[1], "msg_id", line)?;
        let send: u64 = parse_field(&row[2], "send_ts_ms", line)?;
        let recv: Option<u64> = match &row[3] {
            "" => None,
            s => Some(parse_field(s, "recv_ts_ms", line)?),
        };
        let latency: Option<u64> = match &row[4] {
            "" => None,
            s => Some(parse_field(s, "latency_ms", line)?),
        };
        if recv.map(|r| r.checked_sub(send)) != latency.map(Some) {
            return Err(MetricsError::Parse {
                line,
                message: "latency_ms disagrees with timestamps".into(),
            });
        }
        rec.record(hop, msg_id, send, recv)
            .map_err(|e| MetricsError::Parse {
                line,
                message: e.to_string(),
            })?;
    }
    Ok(rec.records())
}
