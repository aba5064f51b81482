//! Trajectories, GPS drift and the experiment presets.
//!
//! A scenario is described by a JSON [`ScenarioConfig`]. Each [`Preset`]
//! supplies a complete default configuration; a user file is merged over it
//! key by key, then the result is parsed strictly (unknown keys rejected) and
//! validated. Errors carry the dotted path of the offending field.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::airlink::ChannelParams;
use crate::companion::{Cadence, IncidentZone};
use crate::geo::{surface_distance_m, GeoError};
use crate::metrics::Hop;
use crate::wire::IncidentType;
use crate::GeoPosition;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t_ms: u64,
    pub pos: GeoPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrajectoryMode {
    HoldLast,
    /// Repeats with period equal to the last waypoint time.
    Loop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
    mode: TrajectoryMode,
}

/// Linear interpolation between two values.
pub fn lerp<T: Float>(a: T, b: T, frac: T) -> T {
    a + (b - a) * frac
}

impl Trajectory {
    /// Requires at least one waypoint and strictly increasing times.
    pub fn new(waypoints: Vec<Waypoint>, mode: TrajectoryMode) -> Result<Self, String> {
        if waypoints.is_empty() {
            return Err("trajectory needs at least one waypoint".into());
        }
        if let Some(w) = waypoints.windows(2).find(|w| w[1].t_ms <= w[0].t_ms) {
            return Err(format!(
                "waypoint times must increase ({} then {})",
                w[0].t_ms, w[1].t_ms
            ));
        }
        Ok(Trajectory { waypoints, mode })
    }

    pub fn stationary(pos: GeoPosition) -> Self {
        Trajectory {
            waypoints: vec![Waypoint { t_ms: 0, pos }],
            mode: TrajectoryMode::HoldLast,
        }
    }

    /// Closed polygonal loop around `center`, starting due north and moving
    /// clockwise, at constant altitude `alt_m`.
    pub fn circle(
        center: GeoPosition,
        radius_m: f64,
        alt_m: f64,
        period_ms: u64,
        segments: usize,
    ) -> Result<Self, String> {
        if !radius_m.is_finite() || radius_m <= 0.0 || period_ms == 0 || segments < 3 {
            return Err("circle needs radius_m > 0, period_ms > 0 and segments >= 3".into());
        }
        let mut wps = Vec::with_capacity(segments + 1);
        for i in 0..=segments {
            let angle = std::f64::consts::TAU * (i % segments) as f64 / segments as f64;
            let pos = center
                .offset_m(radius_m * angle.cos(), radius_m * angle.sin())
                .and_then(|p| p.with_alt(alt_m))
                .map_err(|e| e.to_string())?;
            wps.push(Waypoint {
                t_ms: period_ms * i as u64 / segments as u64,
                pos,
            });
        }
        Trajectory::new(wps, TrajectoryMode::Loop)
    }

    pub fn mode(&self) -> TrajectoryMode {
        self.mode
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn period_ms(&self) -> u64 {
        self.waypoints.last().unwrap().t_ms
    }

    /// Interpolated position. Before the first waypoint the first position is
    /// held; past the end it is held (HOLD_LAST) or wrapped (LOOP).
    pub fn position_at(&self, t_ms: u64) -> GeoPosition {
        let wps = &self.waypoints;
        let first = wps[0];
        let period = self.period_ms();
        let t = match self.mode {
            TrajectoryMode::Loop if period > 0 => t_ms % period,
            _ => t_ms,
        };
        if t <= first.t_ms {
            return first.pos;
        }
        let i = wps.partition_point(|w| w.t_ms <= t);
        if i >= wps.len() {
            return wps[wps.len() - 1].pos;
        }
        let (a, b) = (wps[i - 1], wps[i]);
        let frac = (t - a.t_ms) as f64 / (b.t_ms - a.t_ms) as f64;
        GeoPosition::new(
            lerp(a.pos.lat_deg(), b.pos.lat_deg(), frac),
            lerp(a.pos.lon_deg(), b.pos.lon_deg(), frac),
            lerp(a.pos.alt_m(), b.pos.alt_m(), frac),
        )
        .expect("interpolation between valid positions stays valid")
    }

    /// Ground speed from a centered finite difference over ±`half_window_ms`.
    pub fn ground_speed_mps(&self, t_ms: u64, half_window_ms: u64) -> f64 {
        let t0 = t_ms.saturating_sub(half_window_ms);
        let t1 = t_ms + half_window_ms;
        let d = surface_distance_m(&self.position_at(t0), &self.position_at(t1));
        d / ((t1 - t0) as f64 / 1000.0)
    }
}

/// Altitude drift added to reported (not true) positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub enabled: bool,
    pub alt_drift_mps: f64,
}

pub fn apply_drift(
    pos: GeoPosition,
    drift: &DriftModel,
    t_ms: u64,
) -> Result<GeoPosition, GeoError> {
    if !drift.enabled {
        return Ok(pos);
    }
    pos.with_alt(pos.alt_m() + drift.alt_drift_mps * t_ms as f64 / 1000.0)
}

fn default_segments() -> usize {
    36
}

/// Trajectory as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    Stationary {
        pos: GeoPosition,
    },
    Circle {
        center: GeoPosition,
        radius_m: f64,
        alt_m: f64,
        period_ms: u64,
        #[serde(default = "default_segments")]
        segments: usize,
    },
    Waypoints {
        mode: TrajectoryMode,
        waypoints: Vec<Waypoint>,
    },
}

impl TrajectorySpec {
    pub fn build(&self) -> Result<Trajectory, String> {
        match self {
            TrajectorySpec::Stationary { pos } => Ok(Trajectory::stationary(*pos)),
            TrajectorySpec::Circle {
                center,
                radius_m,
                alt_m,
                period_ms,
                segments,
            } => Trajectory::circle(*center, *radius_m, *alt_m, *period_ms, *segments),
            TrajectorySpec::Waypoints { mode, waypoints } => {
                Trajectory::new(waypoints.clone(), *mode)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub drift: DriftModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopParams {
    pub dsrc: ChannelParams,
    pub udp: ChannelParams,
    pub ws: ChannelParams,
    pub cmp_tcp: ChannelParams,
}

impl HopParams {
    pub fn get(&self, hop: Hop) -> &ChannelParams {
        match hop {
            Hop::Dsrc => &self.dsrc,
            Hop::Udp => &self.udp,
            Hop::Ws => &self.ws,
            Hop::CmpTcp => &self.cmp_tcp,
        }
    }

    pub fn get_mut(&mut self, hop: Hop) -> &mut ChannelParams {
        match hop {
            Hop::Dsrc => &mut self.dsrc,
            Hop::Udp => &mut self.udp,
            Hop::Ws => &mut self.ws,
            Hop::CmpTcp => &mut self.cmp_tcp,
        }
    }

    fn key(hop: Hop) -> &'static str {
        match hop {
            Hop::Dsrc => "dsrc",
            Hop::Udp => "udp",
            Hop::Ws => "ws",
            Hop::CmpTcp => "cmp_tcp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ports {
    pub udp: u16,
    pub cmp: u16,
    pub ws: u16,
}

impl Default for Ports {
    fn default() -> Self {
        Ports {
            udp: 5005,
            cmp: 8008,
            ws: 8765,
        }
    }
}

/// Everything a run needs besides the preset's wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_ms: u64,
    /// DSRC broadcast rate.
    pub broadcast_hz: f64,
    /// How often the companion checks its cadence and geofences.
    pub compose_tick_ms: u64,
    pub cadence: Cadence,
    pub frame_interval_ms: u64,
    pub frame_payload_bytes: usize,
    pub cav: ActorConfig,
    pub uav: ActorConfig,
    pub hops: HopParams,
    pub zones: Vec<IncidentZone>,
    /// CMP clients besides the companion (operators watching for alerts).
    pub cmp_clients: usize,
    pub observers: usize,
    pub staleness_horizon_ms: u64,
    pub ports: Ports,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "exp1")]
    Exp1,
    #[serde(rename = "exp2")]
    Exp2,
    #[serde(rename = "exp2-dynamic")]
    Exp2Dynamic,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Exp1 => "exp1",
            Preset::Exp2 => "exp2",
            Preset::Exp2Dynamic => "exp2-dynamic",
        }
    }

    /// Hops measured in this experiment.
    pub fn hops(self) -> &'static [Hop] {
        match self {
            Preset::Exp1 => &[Hop::Dsrc, Hop::Udp, Hop::Ws],
            Preset::Exp2 | Preset::Exp2Dynamic => &Hop::ALL,
        }
    }

    pub fn has_cmp(self) -> bool {
        self.hops().contains(&Hop::CmpTcp)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "exp1" => Ok(Preset::Exp1),
            "exp2" => Ok(Preset::Exp2),
            "exp2-dynamic" => Ok(Preset::Exp2Dynamic),
            _ => Err(format!(
                "unknown preset {s:?} (expected exp1, exp2, exp2-dynamic)"
            )),
        }
    }
}

/// Parking-lot origin used by the default geometry.
pub fn default_origin() -> GeoPosition {
    GeoPosition::new(40.0, -83.0, 275.0).unwrap()
}

pub const UAV_ORBIT_RADIUS_M: f64 = 25.0;
pub const UAV_ORBIT_HEIGHT_M: f64 = 30.0;
/// The looping CAV circuit is centered this far east of the UAV orbit center.
pub const CAV_LOOP_OFFSET_M: f64 = 80.0;
pub const CAV_LOOP_CIRCUMFERENCE_M: f64 = 120.0;

pub fn cav_loop_center() -> GeoPosition {
    default_origin().offset_m(0.0, CAV_LOOP_OFFSET_M).unwrap()
}

pub fn cav_loop_radius_m() -> f64 {
    CAV_LOOP_CIRCUMFERENCE_M / std::f64::consts::TAU
}

fn link(base: f64, jitter: f64, p_base: f64) -> ChannelParams {
    // Wired and on-board hops are not range-limited.
    ChannelParams {
        base_latency_ms: base,
        jitter_ms: jitter,
        p_base,
        d0_m: 1.0e9,
        dmax_m: 1.0e9,
        latency_per_m: 0.0,
        seed: 0,
    }
}

fn radio(base: f64, jitter: f64, p_base: f64) -> ChannelParams {
    ChannelParams {
        base_latency_ms: base,
        jitter_ms: jitter,
        p_base,
        d0_m: 300.0,
        dmax_m: 1000.0,
        latency_per_m: 0.0,
        seed: 0,
    }
}

/// Per-meter latency applied to each hop when distance coupling is on.
pub const DYNAMIC_COUPLING_MS_PER_M: [(Hop, f64); 4] = [
    (Hop::Dsrc, 0.2),
    (Hop::Udp, 10.0),
    (Hop::Ws, 0.5),
    (Hop::CmpTcp, 2.0),
];

impl ScenarioConfig {
    /// Complete default configuration for a preset.
    pub fn preset(preset: Preset) -> ScenarioConfig {
        let origin = default_origin();
        let uav = ActorConfig {
            trajectory: TrajectorySpec::Circle {
                center: origin,
                radius_m: UAV_ORBIT_RADIUS_M,
                alt_m: origin.alt_m() + UAV_ORBIT_HEIGHT_M,
                period_ms: 60_000,
                segments: 36,
            },
            drift: DriftModel::default(),
        };
        let stationary_cav = ActorConfig {
            trajectory: TrajectorySpec::Stationary { pos: origin },
            drift: DriftModel::default(),
        };
        let base = ScenarioConfig {
            seed: 42,
            duration_ms: 120_000,
            broadcast_hz: 10.0,
            compose_tick_ms: 100,
            cadence: Cadence::default(),
            frame_interval_ms: 1000,
            frame_payload_bytes: 4096,
            cav: stationary_cav,
            uav,
            hops: HopParams {
                dsrc: radio(30.0, 8.0, 0.02),
                udp: link(8000.0, 1000.0, 0.01),
                ws: link(80.0, 20.0, 0.0),
                cmp_tcp: link(500.0, 100.0, 0.0),
            },
            zones: Vec::new(),
            cmp_clients: 2,
            observers: 2,
            staleness_horizon_ms: 10_000,
            ports: Ports::default(),
        };
        match preset {
            Preset::Exp1 => ScenarioConfig {
                cav: ActorConfig {
                    drift: DriftModel {
                        enabled: true,
                        alt_drift_mps: 0.05,
                    },
                    ..base.cav.clone()
                },
                hops: HopParams {
                    dsrc: radio(20.0, 5.0, 0.02),
                    udp: link(2000.0, 300.0, 0.01),
                    ws: link(60.0, 15.0, 0.0),
                    ..base.hops
                },
                ..base
            },
            Preset::Exp2 => base,
            Preset::Exp2Dynamic => {
                let mut hops = base.hops;
                for (hop, k) in DYNAMIC_COUPLING_MS_PER_M {
                    hops.get_mut(hop).latency_per_m = k;
                }
                ScenarioConfig {
                    cav: ActorConfig {
                        trajectory: TrajectorySpec::Circle {
                            center: cav_loop_center(),
                            radius_m: cav_loop_radius_m(),
                            alt_m: origin.alt_m(),
                            period_ms: 30_000,
                            segments: 24,
                        },
                        drift: DriftModel::default(),
                    },
                    hops,
                    ..base
                }
            }
        }
    }

    /// Default configuration for the Quick Clear demonstration on `preset`:
    /// one accident zone on the far side of the CAV circuit, System Messages
    /// every 1.5 to 1.7 s and a 10 frame/s camera feed.
    ///
    /// The cadence ceiling sits below 2 s so that CMP jitter (±100 ms) and
    /// the drift in distance-coupled latency between two messages cannot push
    /// an arrival gap past 2 s.
    pub fn quick_clear(preset: Preset) -> ScenarioConfig {
        let mut c = ScenarioConfig::preset(preset);
        let east_of_loop = cav_loop_center()
            .offset_m(0.0, cav_loop_radius_m())
            .unwrap();
        c.zones = vec![IncidentZone {
            id: "incident-1".into(),
            center: east_of_loop,
            radius_m: 10.0,
            incident_type: IncidentType::Accident,
        }];
        c.cadence = Cadence {
            min_interval_ms: 1500,
            max_interval_ms: 1700,
        };
        c.frame_interval_ms = 100;
        c
    }

    /// Merges a user JSON document over `self` and re-parses strictly.
    pub fn merged_with(&self, overrides: &Value) -> Result<ScenarioConfig, ConfigError> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, overrides);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(base).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_over(preset: Preset, text: &str) -> Result<ScenarioConfig, ConfigError> {
        let overrides: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::new(".", e.to_string()))?;
        if !overrides.is_object() {
            return Err(ConfigError::new(".", "config must be a JSON object"));
        }
        ScenarioConfig::preset(preset).merged_with(&overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.duration_ms == 0 {
            return Err(ConfigError::new("duration_ms", "must be > 0"));
        }
        if !(self.broadcast_hz > 0.0 && self.broadcast_hz <= 1000.0) {
            return Err(ConfigError::new("broadcast_hz", "must be in (0, 1000]"));
        }
        if self.compose_tick_ms == 0 {
            return Err(ConfigError::new("compose_tick_ms", "must be > 0"));
        }
        if self.frame_interval_ms == 0 {
            return Err(ConfigError::new("frame_interval_ms", "must be > 0"));
        }
        if self.frame_payload_bytes < 8 || self.frame_payload_bytes > crate::wire::FRAME_MAX_PAYLOAD
        {
            return Err(ConfigError::new(
                "frame_payload_bytes",
                "must be in [8, 1048576]",
            ));
        }
        if self.cadence.min_interval_ms == 0
            || self.cadence.max_interval_ms < self.cadence.min_interval_ms
        {
            return Err(ConfigError::new(
                "cadence",
                "need 0 < min_interval_ms <= max_interval_ms",
            ));
        }
        for hop in Hop::ALL {
            self.hops.get(hop).validate().map_err(|e| {
                ConfigError::new(format!("hops.{}", HopParams::key(hop)), e.to_string())
            })?;
        }
        for (name, actor) in [("cav", &self.cav), ("uav", &self.uav)] {
            actor
                .trajectory
                .build()
                .map_err(|m| ConfigError::new(format!("{name}.trajectory"), m))?;
            if !actor.drift.alt_drift_mps.is_finite() {
                return Err(ConfigError::new(
                    format!("{name}.drift.alt_drift_mps"),
                    "must be finite",
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, z) in self.zones.iter().enumerate() {
            z.validate()
                .map_err(|m| ConfigError::new(format!("zones[{i}].radius_m"), m))?;
            if !seen.insert(z.id.as_str()) {
                return Err(ConfigError::new(
                    format!("zones[{i}].id"),
                    "duplicate zone id",
                ));
            }
        }
        Ok(())
    }

    /// Broadcast period in milliseconds.
    pub fn broadcast_period_ms(&self) -> u64 {
        ((1000.0 / self.broadcast_hz).round() as u64).max(1)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// A preset bound to its configuration and built trajectories.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub preset: Preset,
    pub config: ScenarioConfig,
    pub cav: Trajectory,
    pub uav: Trajectory,
}

impl Scenario {
    /// Hops measured by this scenario; the CMP hop is absent for EXP1.
    pub fn hops(&self) -> &'static [Hop] {
        self.preset.hops()
    }

    pub fn has_cmp(&self) -> bool {
        self.preset.has_cmp()
    }

    /// Seed for a hop's channel: the run seed mixed with the hop and any
    /// per-hop seed from the config.
    pub fn hop_seed(&self, hop: Hop) -> u64 {
        let idx = Hop::ALL.iter().position(|h| *h == hop).unwrap() as u64;
        splitmix64(self.config.seed ^ idx.wrapping_mul(0xA24B_AED4_963E_E407))
            ^ self.config.hops.get(hop).seed
    }

    pub fn channel_params(&self, hop: Hop) -> ChannelParams {
        ChannelParams {
            seed: self.hop_seed(hop),
            ..*self.config.hops.get(hop)
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Validates `config` and builds the actors for `preset`.
pub fn build_experiment(preset: Preset, config: ScenarioConfig) -> Result<Scenario, ConfigError> {
    config.validate()?;
    let cav = config
        .cav
        .trajectory
        .build()
        .map_err(|m| ConfigError::new("cav.trajectory", m))?;
    let uav = config
        .uav
        .trajectory
        .build()
        .map_err(|m| ConfigError::new("uav.trajectory", m))?;
    Ok(Scenario {
        preset,
        config,
        cav,
        uav,
    })
}
