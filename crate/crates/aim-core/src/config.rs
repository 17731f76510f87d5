//! Run configuration: the file schema, validated defaults, and the named
//! weight profiles used by the comparison harness.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::SchedulingWeights;
use crate::model::{LaneId, PhysicalParams};
use crate::ocp::Weights;
use crate::IntersectionModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Coordination strategy for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Demand-driven sequential scheduling.
    Ddswa,
    /// First-in-first-out sequencing.
    Fifo,
    /// Exhaustive search over admissible crossing orders.
    Combined,
    /// Fixed-time signal (Webster timing).
    Signal,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] =
        [Algorithm::Ddswa, Algorithm::Fifo, Algorithm::Combined, Algorithm::Signal];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ddswa => "ddswa",
            Algorithm::Fifo => "fifo",
            Algorithm::Combined => "combined",
            Algorithm::Signal => "signal",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddswa" => Ok(Algorithm::Ddswa),
            "fifo" => Ok(Algorithm::Fifo),
            "combined" => Ok(Algorithm::Combined),
            "signal" => Ok(Algorithm::Signal),
            other => Err(format!(
                "unknown algorithm {other:?} (expected ddswa, fifo, combined, or signal)"
            )),
        }
    }
}

/// How long to simulate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationRule {
    /// Fixed horizon, s.
    Seconds(f64),
    /// This many cycles of the Webster plan for the configured demand.
    WebsterCycles(u32),
}

/// Intersection layout selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryRef {
    /// Four straight single-lane approaches crossing at right angles.
    DefaultCross,
}

/// Planning and coordination clocks, s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    /// Coordination period: rounds fire at every multiple.
    pub t_coop: f64,
    /// Coordinated-phase solve horizon.
    pub t_c: f64,
    /// Objective evaluation window per vehicle.
    pub t_h: f64,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons { t_coop: 3.0, t_c: 30.0, t_h: 30.0 }
    }
}

/// Complete, serializable description of one simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub geometry: GeometryRef,
    pub params: PhysicalParams,
    /// Trajectory objective weights (velocity reward, accel/jerk penalties).
    pub weights: Weights,
    pub sched: SchedulingWeights,
    pub horizons: Horizons,
    /// Requested Poisson arrival rate per lane, veh/s.
    #[serde(with = "lane_rate_map")]
    pub lane_rates: BTreeMap<LaneId, f64>,
    pub algorithm: Algorithm,
    pub duration: DurationRule,
    /// Sample step, s.
    pub dt: f64,
    pub seed: u64,
    /// KKT tolerance for the trajectory solver.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest batch the exhaustive search will accept before refusing.
    pub max_batch: usize,
    /// Signal saturation flow, veh/s (None: car-following limit).
    pub sat_flow: Option<f64>,
    /// Signal clearance time per phase, s.
    pub lost_per_phase: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let params = PhysicalParams::default();
        RunConfig {
            geometry: GeometryRef::DefaultCross,
            params,
            weights: Weights::new(1.0, 0.0, 0.0),
            sched: SchedulingWeights::default(),
            horizons: Horizons::default(),
            lane_rates: [(2, 0.05), (5, 0.05), (8, 0.05), (11, 0.05)].into_iter().collect(),
            algorithm: Algorithm::Ddswa,
            duration: DurationRule::WebsterCycles(10),
            dt: 0.1,
            seed: 1,
            tolerance: 1e-6,
            max_iterations: 200,
            max_batch: 6,
            sat_flow: None,
            lost_per_phase: 4.0,
        }
    }
}

/// TOML maps need string keys; lane ids are numeric, so bridge them.
mod lane_rate_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<LaneId, f64>, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<LaneId, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<LaneId>()
                    .map(|lane| (lane, v))
                    .map_err(|_| serde::de::Error::custom(format!("lane id {k:?} is not a number")))
            })
            .collect()
    }
}

fn near_integer(x: f64) -> bool {
    (x - x.round()).abs() < 1e-9 && x.round() >= 1.0
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Config echo for reproducible reports.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> IntersectionModel {
        match self.geometry {
            GeometryRef::DefaultCross => IntersectionModel::default_cross(self.params),
        }
    }

    /// Signal saturation flow after defaulting.
    pub fn saturation_flow(&self) -> f64 {
        self.sat_flow
            .unwrap_or_else(|| crate::signalized::default_saturation_flow(&self.params))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        self.params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.dt > 0.0) {
            return err(format!("dt must be positive, got {}", self.dt));
        }
        let h = &self.horizons;
        if !(h.t_coop > 0.0) {
            return err(format!("t_coop must be positive, got {}", h.t_coop));
        }
        if h.t_c < h.t_coop {
            return err(format!("t_c ({}) must be at least t_coop ({})", h.t_c, h.t_coop));
        }
        for (name, v) in [("t_coop", h.t_coop), ("t_c", h.t_c), ("t_h", h.t_h)] {
            if !near_integer(v / self.dt) {
                return err(format!("{name} ({v}) must be a positive multiple of dt ({})", self.dt));
            }
        }
        match self.duration {
            DurationRule::Seconds(s) if !(s > 0.0) => {
                return err(format!("duration must be positive, got {s} s"));
            }
            DurationRule::WebsterCycles(0) => {
                return err("duration must be positive, got 0 cycles".into());
            }
            _ => {}
        }
        let model = self.model();
        if self.lane_rates.is_empty() {
            return err("at least one lane rate is required".into());
        }
        for (&lane, &rate) in &self.lane_rates {
            model
                .lane(lane)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !rate.is_finite() || rate < 0.0 {
                return err(format!("lane {lane} rate must be finite and nonnegative, got {rate}"));
            }
        }
        for (name, w) in [
            ("weight_velocity", self.weights.velocity),
            ("weight_accel", self.weights.accel),
            ("weight_jerk", self.weights.jerk),
        ] {
            if !w.is_finite() || w < 0.0 {
                return err(format!("{name} must be finite and nonnegative, got {w}"));
            }
        }
        if !(self.tolerance > 0.0) {
            return err(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iterations == 0 {
            return err("max_iterations must be at least 1".into());
        }
        if self.max_batch == 0 {
            return err("max_batch must be at least 1".into());
        }
        if let Some(s) = self.sat_flow {
            if !(s > 0.0) {
                return err(format!("sat_flow must be positive, got {s}"));
            }
        }
        if !(self.lost_per_phase > 0.0) {
            return err(format!("lost_per_phase must be positive, got {}", self.lost_per_phase));
        }
        Ok(())
    }

    /// Number of dt steps in the coordinated-phase horizon.
    pub fn horizon_steps(&self) -> usize {
        (self.horizons.t_c / self.dt).round() as usize
    }

    /// Homogeneous rate for every lane of the geometry.
    pub fn set_uniform_rate(&mut self, rate: f64) {
        let lanes: Vec<LaneId> = self.model().lanes().iter().map(|l| l.id).collect();
        self.lane_rates = lanes.into_iter().map(|l| (l, rate)).collect();
    }
}

/// Named weight profile: trajectory weights plus scheduling weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub weights: Weights,
    pub sched: SchedulingWeights,
}

/// `throughput`: velocity-only objective, scheduling tuned for homogeneous
/// demand. `inhomogeneous`: velocity-only objective, scheduling tuned for
/// lopsided demand (heavier lane-rate and queue terms). `comfort`: equal
/// velocity/accel/jerk weights with patient scheduling.
pub fn weight_profile(name: &str) -> Option<WeightProfile> {
    let sched = |w_x, w_v, w_t, w_n, w_s, w_sigma, w_w, w_l| SchedulingWeights {
        w_x,
        w_v,
        w_t,
        w_n,
        w_s,
        w_sigma,
        w_w,
        w_l,
    };
    match name {
        "throughput" => Some(WeightProfile {
            weights: Weights::new(1.0, 0.0, 0.0),
            sched: SchedulingWeights::default(),
        }),
        "inhomogeneous" => Some(WeightProfile {
            weights: Weights::new(1.0, 0.0, 0.0),
            sched: sched(0.5, 4.0, 3.0, 6.0, 7.0, 65.0, 1.0, 0.02),
        }),
        "comfort" => Some(WeightProfile {
            weights: Weights::new(1.0, 1.0, 1.0),
            sched: sched(0.8, 7.0, 5.0, 5.0, 7.0, 40.0, 5.0, 0.02),
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.horizon_steps(), 300);
        assert!((cfg.saturation_flow() - 11.11 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.algorithm = Algorithm::Combined;
        cfg.duration = DurationRule::Seconds(120.0);
        cfg.seed = 99;
        cfg.lane_rates.insert(5, 0.09);
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            algorithm = "fifo"
            seed = 7
            duration = { seconds = 60.0 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Fifo);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.duration, DurationRule::Seconds(60.0));
        assert_eq!(cfg.dt, 0.1);
        assert_eq!(cfg.lane_rates.len(), 4);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = RunConfig::default();
        cfg.horizons.t_c = 2.0; // below t_coop
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.horizons.t_coop = 3.14; // off-grid
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.lane_rates.insert(7, 0.1); // unknown lane
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.lane_rates.insert(2, -0.1);
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.duration = DurationRule::WebsterCycles(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("webster".parse::<Algorithm>().is_err());
    }

    #[test]
    fn profiles_match_their_comparisons() {
        let t = weight_profile("throughput").unwrap();
        assert_eq!(t.weights, Weights::new(1.0, 0.0, 0.0));
        assert_eq!(t.sched, SchedulingWeights::default());

        let i = weight_profile("inhomogeneous").unwrap();
        assert_eq!(i.weights, Weights::new(1.0, 0.0, 0.0));
        assert_eq!(i.sched.w_x, 0.5);
        assert_eq!(i.sched.w_v, 4.0);
        assert_eq!(i.sched.w_n, 6.0);
        assert_eq!(i.sched.w_t, 3.0);
        assert_eq!(i.sched.w_sigma, 65.0);
        assert_eq!(i.sched.w_s, 7.0);
        assert_eq!(i.sched.w_w, 1.0);
        assert_eq!(i.sched.w_l, 0.02);

        let c = weight_profile("comfort").unwrap();
        assert_eq!(c.weights, Weights::new(1.0, 1.0, 1.0));
        assert_eq!(c.sched.w_x, 0.8);
        assert_eq!(c.sched.w_v, 7.0);
        assert_eq!(c.sched.w_n, 5.0);
        assert_eq!(c.sched.w_t, 5.0);
        assert_eq!(c.sched.w_sigma, 40.0);
        assert_eq!(c.sched.w_s, 7.0);
        assert_eq!(c.sched.w_w, 5.0);

        assert!(weight_profile("nope").is_none());
    }

    #[test]
    fn uniform_rate_covers_all_lanes() {
        let mut cfg = RunConfig::default();
        cfg.set_uniform_rate(0.09);
        assert_eq!(cfg.lane_rates.len(), 4);
        assert!(cfg.lane_rates.values().all(|&r| r == 0.09));
    }
}
