//! Seeded, deterministic model of a lossy link.
//!
//! Used for the CAV↔UAV DSRC broadcast and, in simulation, for the wired hops
//! behind it. Drop probability is flat at `p_base` up to `d0_m`, ramps
//! linearly to 1 at `dmax_m` and stays there. Delivered packets arrive after
//! `base_latency_ms + latency_per_m · d` plus uniform jitter in
//! `[−jitter_ms, +jitter_ms]`, never at or before the send time.
//!
//! Every transmission consumes exactly two variates (drop draw, jitter draw)
//! so the stream position depends only on how many packets were sent.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::slant_distance_m;
use crate::GeoPosition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub base_latency_ms: f64,
    /// Half-width of the uniform jitter.
    pub jitter_ms: f64,
    pub p_base: f64,
    pub d0_m: f64,
    pub dmax_m: f64,
    /// Extra latency per meter of link distance. Zero disables distance coupling.
    #[serde(default)]
    pub latency_per_m: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            base_latency_ms: 30.0,
            jitter_ms: 0.0,
            p_base: 0.0,
            d0_m: 300.0,
            dmax_m: 1000.0,
            latency_per_m: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid channel parameter {0}")]
    InvalidParams(&'static str),
    #[error("transmit at {got} ms after one at {last} ms; calls must be in send order")]
    OutOfOrder { last: u64, got: u64 },
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let finite_non_neg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_non_neg(self.base_latency_ms) {
            return Err(ChannelError::InvalidParams("base_latency_ms"));
        }
        if !finite_non_neg(self.jitter_ms) {
            return Err(ChannelError::InvalidParams("jitter_ms"));
        }
        if !(0.0..=1.0).contains(&self.p_base) {
            return Err(ChannelError::InvalidParams("p_base"));
        }
        if !finite_non_neg(self.d0_m) {
            return Err(ChannelError::InvalidParams("d0_m"));
        }
        if !(self.dmax_m.is_finite() && self.dmax_m >= self.d0_m) {
            return Err(ChannelError::InvalidParams("dmax_m"));
        }
        if !finite_non_neg(self.latency_per_m) {
            return Err(ChannelError::InvalidParams("latency_per_m"));
        }
        Ok(())
    }
}

/// Verdict for one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeliveryOutcome {
    Delivered { arrival_ts_ms: u64 },
    Dropped,
}

impl DeliveryOutcome {
    pub fn arrival(&self) -> Option<u64> {
        match *self {
            DeliveryOutcome::Delivered { arrival_ts_ms } => Some(arrival_ts_ms),
            DeliveryOutcome::Dropped => None,
        }
    }

    pub fn is_delivered(&self) -> bool {
        self.arrival().is_some()
    }
}

/// Piecewise-linear drop ramp, generic over the float width.
pub fn drop_ramp<T: Float>(d_m: T, p_base: T, d0_m: T, dmax_m: T) -> T {
    if d_m <= d0_m {
        p_base
    } else if d_m >= dmax_m {
        T::one()
    } else {
        let frac = (d_m - d0_m) / (dmax_m - d0_m);
        p_base + (T::one() - p_base) * frac
    }
}

pub fn drop_probability(d_m: f64, p: &ChannelParams) -> f64 {
    drop_ramp(d_m, p.p_base, p.d0_m, p.dmax_m)
}

/// One channel instance with its own RNG stream.
#[derive(Debug, Clone)]
pub struct Channel {
    params: ChannelParams,
    rng: ChaCha8Rng,
    last_send: Option<u64>,
    sent: u64,
    dropped: u64,
}

impl Channel {
    pub fn new(params: ChannelParams) -> Result<Self, ChannelError> {
        params.validate()?;
        Ok(Channel {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
            last_send: None,
            sent: 0,
            dropped: 0,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Sends one packet between two positions; the link distance is the slant
    /// range between them.
    pub fn transmit(
        &mut self,
        tx: &GeoPosition,
        rx: &GeoPosition,
        send_ts_ms: u64,
    ) -> Result<DeliveryOutcome, ChannelError> {
        self.transmit_at(slant_distance_m(tx, rx), send_ts_ms)
    }

    /// Sends one packet over a link of the given length.
    pub fn transmit_at(
        &mut self,
        d_m: f64,
        send_ts_ms: u64,
    ) -> Result<DeliveryOutcome, ChannelError> {
        if let Some(last) = self.last_send {
            if send_ts_ms < last {
                return Err(ChannelError::OutOfOrder {
                    last,
                    got: send_ts_ms,
                });
            }
        }
        self.last_send = Some(send_ts_ms);
        self.sent += 1;

        let drop_draw: f64 = self.rng.random();
        let jitter_draw: f64 = self.rng.random();

        if drop_draw < drop_probability(d_m, &self.params) {
            self.dropped += 1;
            return Ok(DeliveryOutcome::Dropped);
        }
        let p = &self.params;
        let jitter = (2.0 * jitter_draw - 1.0) * p.jitter_ms;
        let latency = (p.base_latency_ms + p.latency_per_m * d_m + jitter).round();
        let latency = if latency < 1.0 { 1 } else { latency as u64 };
        Ok(DeliveryOutcome::Delivered {
            arrival_ts_ms: send_ts_ms + latency,
        })
    }
}
