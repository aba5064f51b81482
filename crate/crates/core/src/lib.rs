//! Testbed for a CAV → UAV → CMP incident relay ("Quick Clear").
//!
//! A connected vehicle broadcasts its state over a simulated DSRC link to an
//! aerial relay. The relay's companion computer forwards position reports and
//! one-shot incident alerts to a contingency management platform over a
//! framed TCP stream, and publishes camera frames over WebSocket. Every hop
//! is timed so per-hop latency and drop statistics can be reported.

pub mod airlink;
pub mod clock;
pub mod cmp;
pub mod companion;
pub mod framesock;
pub mod geo;
pub mod harness;
pub mod metrics;
pub mod scenario;
pub mod wire;

/// Double-precision geodetic position used by every message type.
pub type GeoPosition = geo::GeoPoint<f64>;
/// Single-precision position, for callers that store coarse tracks.
pub type GeoPositionF32 = geo::GeoPoint<f32>;
