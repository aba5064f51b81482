//! Message schemas and the byte formats used on each hop.
//!
//! * DSRC / OBU datagrams carry a fixed 56-byte big-endian CAV state frame
//!   protected by a CRC-32.
//! * The CMP stream carries length-prefixed JSON records (4-byte big-endian
//!   length, then a UTF-8 JSON object tagged by `"kind"`).
//! * Camera frames travel over the frame socket as a small binary header
//!   followed by the opaque payload.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geo::{Field, GeoError};
use crate::GeoPosition;

/// Total length of an encoded CAV state frame.
pub const CAV_FRAME_LEN: usize = 56;
pub const CAV_MAGIC: [u8; 2] = [0x56, 0x32];
pub const CAV_VERSION: u8 = 1;
pub const CAV_MSG_TYPE: u8 = 1;

/// Largest JSON body accepted on the CMP stream.
pub const CMP_MAX_BODY: usize = 65_536;
pub const CMP_PREFIX_LEN: usize = 4;

pub const FRAME_MAGIC: [u8; 2] = [0x46, 0x50];
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 23;
/// Largest camera payload carried by one [`FramePacket`].
pub const FRAME_MAX_PAYLOAD: usize = 1_048_576;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("frame truncated: expected {expected} bytes, got {actual}")]
    FrameTruncated { expected: usize, actual: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected message type {0}")]
    WrongMessageType(u8),
    #[error("checksum mismatch: frame says {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} out of range")]
    OutOfRange(&'static str),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("body of {0} bytes exceeds limit")]
    BodyTooLarge(usize),
    #[error("malformed body: {0}")]
    MalformedBody(String),
    #[error("unknown record kind {0:?}")]
    UnknownKind(String),
}

impl From<GeoError> for WireError {
    fn from(e: GeoError) -> Self {
        let GeoError::OutOfRange(field) = e;
        WireError::OutOfRange(match field {
            Field::Lat => "lat",
            Field::Lon => "lon",
            Field::Alt => "alt",
        })
    }
}

/// State broadcast by the CAV over DSRC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavStateMessage {
    pub pos: GeoPosition,
    pub tx_timestamp_ms: u64,
    pub gps_time_ms: u64,
    pub ground_speed_mps: f64,
}

impl CavStateMessage {
    pub fn validate(&self) -> Result<(), WireError> {
        if !(self.ground_speed_mps >= 0.0 && self.ground_speed_mps.is_finite()) {
            return Err(WireError::OutOfRange("ground_speed"));
        }
        if self.tx_timestamp_ms == 0 {
            return Err(WireError::OutOfRange("tx_timestamp"));
        }
        if self.gps_time_ms == 0 {
            return Err(WireError::OutOfRange("gps_time"));
        }
        Ok(())
    }
}

/// Periodic position report sent from the companion to the CMP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemMessage {
    pub msg_timestamp_ms: u64,
    /// `None` until the first CAV fix arrives.
    pub cav_pos: Option<GeoPosition>,
    pub uav_pos: GeoPosition,
    /// Age of the CAV fix at composition time; −1 when `cav_pos` is absent.
    #[serde(rename = "x_cav_age_ms")]
    pub cav_age_ms: i64,
}

/// Sentinel age carried when no CAV fix has been received yet.
pub const NO_FIX_AGE: i64 = -1;

impl SystemMessage {
    pub fn validate(&self) -> Result<(), WireError> {
        match (self.cav_pos, self.cav_age_ms) {
            (Some(_), age) if age >= 0 => Ok(()),
            (None, NO_FIX_AGE) => Ok(()),
            (Some(_), _) => Err(WireError::InvalidMessage(
                "x_cav_age_ms must be >= 0 when cav_pos is present".into(),
            )),
            (None, _) => Err(WireError::InvalidMessage(
                "x_cav_age_ms must be -1 when cav_pos is null".into(),
            )),
        }
    }
}

/// Closed registry of incident codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "IncidentCode", into = "u8")]
pub enum IncidentType {
    Accident = 1,
    Debris = 2,
    StalledVehicle = 3,
}

impl IncidentType {
    pub const ALL: [IncidentType; 3] = [
        IncidentType::Accident,
        IncidentType::Debris,
        IncidentType::StalledVehicle,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            IncidentType::Accident => "ACCIDENT",
            IncidentType::Debris => "DEBRIS",
            IncidentType::StalledVehicle => "STALLED_VEHICLE",
        }
    }
}

impl fmt::Display for IncidentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for IncidentType {
    type Error = String;

    fn try_from(code: u8) -> Result<Self, String> {
        IncidentType::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or_else(|| format!("unknown incident code {code}"))
    }
}

impl From<IncidentType> for u8 {
    fn from(t: IncidentType) -> u8 {
        t.code()
    }
}

/// Incident types are written as their numeric code; configuration files may
/// also spell them by name.
#[derive(Deserialize)]
#[serde(untagged)]
enum IncidentCode {
    Code(u8),
    Name(String),
}

impl TryFrom<IncidentCode> for IncidentType {
    type Error = String;

    fn try_from(c: IncidentCode) -> Result<Self, String> {
        match c {
            IncidentCode::Code(code) => IncidentType::try_from(code),
            IncidentCode::Name(name) => IncidentType::ALL
                .into_iter()
                .find(|t| t.name() == name)
                .ok_or_else(|| format!("unknown incident type {name:?}")),
        }
    }
}

/// One-shot incident report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultMessage {
    pub incident_pos: GeoPosition,
    pub incident_time_ms: u64,
    pub incident_type: IncidentType,
}

/// Every record kind that travels on the CMP stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CmpFrame {
    /// First frame on every connection; registers the client.
    Hello {
        client_id: String,
    },
    System(SystemMessage),
    Fault(FaultMessage),
    Ack {
        seq: u64,
    },
    Alert {
        alert_seq: u64,
        fault: FaultMessage,
    },
    Error {
        reason: String,
    },
}

const CMP_KINDS: [&str; 6] = ["hello", "system", "fault", "ack", "alert", "error"];

impl CmpFrame {
    pub fn kind(&self) -> &'static str {
        match self {
            CmpFrame::Hello { .. } => "hello",
            CmpFrame::System(_) => "system",
            CmpFrame::Fault(_) => "fault",
            CmpFrame::Ack { .. } => "ack",
            CmpFrame::Alert { .. } => "alert",
            CmpFrame::Error { .. } => "error",
        }
    }

    fn validate(&self) -> Result<(), WireError> {
        match self {
            CmpFrame::System(m) => m.validate(),
            CmpFrame::Hello { client_id } if client_id.is_empty() => {
                Err(WireError::InvalidMessage("empty client_id".into()))
            }
            _ => Ok(()),
        }
    }
}

impl From<SystemMessage> for CmpFrame {
    fn from(m: SystemMessage) -> Self {
        CmpFrame::System(m)
    }
}

impl From<FaultMessage> for CmpFrame {
    fn from(m: FaultMessage) -> Self {
        CmpFrame::Fault(m)
    }
}

/// Camera frame handed to the frame socket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub frame_seq: u64,
    pub capture_ts_ms: u64,
    pub payload: Vec<u8>,
}

impl FramePacket {
    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Encodes a CAV state message into its 56-byte DSRC frame.
///
/// Layout (big-endian): magic `"V2"` | version | type | lat f64 | lon f64 |
/// alt f64 | tx_timestamp u64 | gps_time u64 | ground_speed f64 | CRC-32.
pub fn encode_cav_state(m: &CavStateMessage) -> Result<[u8; CAV_FRAME_LEN], WireError> {
    m.validate()?;
    let mut out = [0u8; CAV_FRAME_LEN];
    out[0..2].copy_from_slice(&CAV_MAGIC);
    out[2] = CAV_VERSION;
    out[3] = CAV_MSG_TYPE;
    out[4..12].copy_from_slice(&m.pos.lat_deg().to_be_bytes());
    out[12..20].copy_from_slice(&m.pos.lon_deg().to_be_bytes());
    out[20..28].copy_from_slice(&m.pos.alt_m().to_be_bytes());
    out[28..36].copy_from_slice(&m.tx_timestamp_ms.to_be_bytes());
    out[36..44].copy_from_slice(&m.gps_time_ms.to_be_bytes());
    out[44..52].copy_from_slice(&m.ground_speed_mps.to_be_bytes());
    let crc = crc32(&out[..52]);
    out[52..56].copy_from_slice(&crc.to_be_bytes());
    Ok(out)
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b.try_into().expect("8-byte slice"))
}

fn be_f64(b: &[u8]) -> f64 {
    f64::from_be_bytes(b.try_into().expect("8-byte slice"))
}

/// Decodes a DSRC frame. Checks run in order: length, magic, checksum,
/// version, type, field ranges.
pub fn decode_cav_state(b: &[u8]) -> Result<CavStateMessage, WireError> {
    if b.len() != CAV_FRAME_LEN {
        return Err(WireError::FrameTruncated {
            expected: CAV_FRAME_LEN,
            actual: b.len(),
        });
    }
    if b[0..2] != CAV_MAGIC {
        return Err(WireError::BadMagic);
    }
    let stored = u32::from_be_bytes(b[52..56].try_into().unwrap());
    let computed = crc32(&b[..52]);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    if b[2] != CAV_VERSION {
        return Err(WireError::UnsupportedVersion(b[2]));
    }
    if b[3] != CAV_MSG_TYPE {
        return Err(WireError::WrongMessageType(b[3]));
    }
    let pos = GeoPosition::new(be_f64(&b[4..12]), be_f64(&b[12..20]), be_f64(&b[20..28]))?;
    let m = CavStateMessage {
        pos,
        tx_timestamp_ms: be_u64(&b[28..36]),
        gps_time_ms: be_u64(&b[36..44]),
        ground_speed_mps: be_f64(&b[44..52]),
    };
    m.validate()?;
    Ok(m)
}

/// Frames a CMP record: 4-byte big-endian body length, then the JSON body.
pub fn encode_cmp_record(frame: &CmpFrame) -> Result<Vec<u8>, WireError> {
    frame.validate()?;
    let body = serde_json::to_vec(frame).map_err(|e| WireError::InvalidMessage(e.to_string()))?;
    if body.len() > CMP_MAX_BODY {
        return Err(WireError::InvalidMessage(format!(
            "body of {} bytes exceeds {CMP_MAX_BODY}",
            body.len()
        )));
    }
    let mut out = Vec::with_capacity(CMP_PREFIX_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Result of one incremental decode attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum CmpDecode {
    /// The buffer does not yet hold a complete frame.
    NeedMoreData,
    /// A full frame was decoded; `consumed` bytes belong to it.
    Record { frame: CmpFrame, consumed: usize },
}

/// A complete but invalid frame. `frame_len` is the number of bytes the bad
/// frame occupies on the stream (prefix included) so the caller can skip it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct CmpFrameError {
    pub error: WireError,
    pub frame_len: usize,
}

fn parse_cmp_body(body: &[u8]) -> Result<CmpFrame, WireError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| WireError::MalformedBody(e.to_string()))?;
    let kind = value
        .get("kind")
        .ok_or_else(|| WireError::MalformedBody("missing \"kind\"".into()))?
        .as_str()
        .ok_or_else(|| WireError::MalformedBody("\"kind\" is not a string".into()))?;
    if !CMP_KINDS.contains(&kind) {
        return Err(WireError::UnknownKind(kind.to_string()));
    }
    let frame: CmpFrame =
        serde_json::from_value(value).map_err(|e| WireError::MalformedBody(e.to_string()))?;
    frame.validate()?;
    Ok(frame)
}

/// Decodes the first CMP frame in `buf`, if complete. Bytes past the frame are
/// left for the next call.
pub fn decode_cmp_record(buf: &[u8]) -> Result<CmpDecode, CmpFrameError> {
    if buf.len() < CMP_PREFIX_LEN {
        return Ok(CmpDecode::NeedMoreData);
    }
    let len = u32::from_be_bytes(buf[..CMP_PREFIX_LEN].try_into().unwrap()) as usize;
    let frame_len = CMP_PREFIX_LEN + len;
    if len > CMP_MAX_BODY {
        return Err(CmpFrameError {
            error: WireError::BodyTooLarge(len),
            frame_len,
        });
    }
    if buf.len() < frame_len {
        return Ok(CmpDecode::NeedMoreData);
    }
    match parse_cmp_body(&buf[CMP_PREFIX_LEN..frame_len]) {
        Ok(frame) => Ok(CmpDecode::Record {
            frame,
            consumed: frame_len,
        }),
        Err(error) => Err(CmpFrameError { error, frame_len }),
    }
}

/// Per-connection reassembly buffer for the CMP stream.
///
/// Invalid frames are reported once and skipped, so the stream stays usable.
/// Oversized frames are skipped without being buffered.
#[derive(Debug, Default)]
pub struct CmpDecoder {
    buf: Vec<u8>,
    skip: usize,
}

impl CmpDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        let skipped = self.skip.min(bytes.len());
        self.skip -= skipped;
        self.buf.extend_from_slice(&bytes[skipped..]);
    }

    /// Bytes held but not yet decoded.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next decoded frame, `None` when more data is needed.
    pub fn next_frame(&mut self) -> Option<Result<CmpFrame, WireError>> {
        match decode_cmp_record(&self.buf) {
            Ok(CmpDecode::NeedMoreData) => None,
            Ok(CmpDecode::Record { frame, consumed }) => {
                self.buf.drain(..consumed);
                Some(Ok(frame))
            }
            Err(CmpFrameError { error, frame_len }) => {
                let have = frame_len.min(self.buf.len());
                self.buf.drain(..have);
                self.skip = frame_len - have;
                Some(Err(error))
            }
        }
    }
}

/// Encodes a camera frame: magic `"FP"` | version | seq u64 | capture_ts u64 |
/// payload_len u32 | payload.
pub fn encode_frame_packet(p: &FramePacket) -> Result<Vec<u8>, WireError> {
    if p.payload.len() > FRAME_MAX_PAYLOAD {
        return Err(WireError::InvalidMessage(format!(
            "payload of {} bytes exceeds {FRAME_MAX_PAYLOAD}",
            p.payload.len()
        )));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + p.payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&p.frame_seq.to_be_bytes());
    out.extend_from_slice(&p.capture_ts_ms.to_be_bytes());
    out.extend_from_slice(&(p.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

pub fn decode_frame_packet(b: &[u8]) -> Result<FramePacket, WireError> {
    if b.len() < FRAME_HEADER_LEN {
        return Err(WireError::FrameTruncated {
            expected: FRAME_HEADER_LEN,
            actual: b.len(),
        });
    }
    if b[0..2] != FRAME_MAGIC {
        return Err(WireError::BadMagic);
    }
    if b[2] != FRAME_VERSION {
        return Err(WireError::UnsupportedVersion(b[2]));
    }
    let len = u32::from_be_bytes(b[19..23].try_into().unwrap()) as usize;
    if len > FRAME_MAX_PAYLOAD {
        return Err(WireError::OutOfRange("payload_len"));
    }
    if b.len() != FRAME_HEADER_LEN + len {
        return Err(WireError::FrameTruncated {
            expected: FRAME_HEADER_LEN + len,
            actual: b.len(),
        });
    }
    Ok(FramePacket {
        frame_seq: be_u64(&b[3..11]),
        capture_ts_ms: be_u64(&b[11..19]),
        payload: b[FRAME_HEADER_LEN..].to_vec(),
    })
}
