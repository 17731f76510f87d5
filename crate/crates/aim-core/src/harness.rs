//! Experiment harness: algorithm × arrival-rate grids, per-cell statistics,
//! and plot-ready report emission.
//!
//! A comparison runs `trials` seeded simulations per (algorithm, σ) cell,
//! each lasting ten cycles of the fixed-time plan computed for that demand,
//! and aggregates crossing times, running objectives, batch sizes, message
//! counts, realized arrival rates, and planning time per vehicle. Trial seeds
//! are `master + trial_index`, so every algorithm sees the same arrival
//! streams (common random numbers). The JSON report is byte-deterministic:
//! wall-clock fields are zeroed there and only appear in the timing CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrivals::ArrivalLog;
use crate::config::{Algorithm, ConfigError, DurationRule, RunConfig, weight_profile};
use crate::engine::{self, CommCounts, EngineError, VehicleRecord};
use crate::model::VehicleId;

/// How a grid value σ maps to per-lane arrival rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePattern {
    /// Every lane at σ.
    #[default]
    Uniform,
    /// Odd-indexed lanes (in ascending lane-id order) at σ/2, the rest at σ.
    Alternating,
}

/// One comparison grid: algorithms × arrival rates, repeated over trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    /// Template for every cell; algorithm, rates, seed, and duration are
    /// overridden per cell and the resolved template is embedded in the
    /// report.
    pub base: RunConfig,
    pub algorithms: Vec<Algorithm>,
    /// Arrival-rate grid, veh/s/lane.
    pub sigmas: Vec<f64>,
    /// Seeded repetitions per cell.
    pub trials: u32,
    pub pattern: RatePattern,
    /// Named weight profile applied to the base config (see
    /// [`weight_profile`]); `None` keeps the base weights.
    pub profile: Option<String>,
    /// Fixed-time cycles per trial.
    pub cycles: u32,
}

impl Default for ComparisonSpec {
    fn default() -> Self {
        ComparisonSpec {
            base: RunConfig::default(),
            algorithms: vec![Algorithm::Ddswa, Algorithm::Fifo],
            sigmas: vec![0.05],
            trials: 20,
            pattern: RatePattern::Uniform,
            profile: None,
            cycles: 10,
        }
    }
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.base.validate()?;
        if self.algorithms.is_empty() {
            return Err(ConfigError::Invalid("algorithm list is empty".into()));
        }
        if self.sigmas.is_empty() {
            return Err(ConfigError::Invalid("sigma grid is empty".into()));
        }
        if !self.sigmas.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(ConfigError::Invalid("sigmas must be finite and nonnegative".into()));
        }
        if self.trials == 0 {
            return Err(ConfigError::Invalid("trials must be at least 1".into()));
        }
        if self.cycles == 0 {
            return Err(ConfigError::Invalid("cycles must be at least 1".into()));
        }
        if let Some(name) = &self.profile {
            if weight_profile(name).is_none() {
                return Err(ConfigError::Invalid(format!("unknown weight profile `{name}`")));
            }
        }
        Ok(())
    }

    /// The fully resolved config of one trial.
    pub fn cell_config(&self, algorithm: Algorithm, sigma: f64, trial: u32) -> RunConfig {
        let mut cfg = self.base.clone();
        if let Some(name) = &self.profile {
            let p = weight_profile(name).expect("validated profile");
            cfg.weights = p.weights;
            cfg.sched = p.sched;
        }
        cfg.algorithm = algorithm;
        let lanes: Vec<_> = cfg.lane_rates.keys().copied().collect();
        for (i, lane) in lanes.iter().enumerate() {
            let rate = match self.pattern {
                RatePattern::Uniform => sigma,
                RatePattern::Alternating if i % 2 == 1 => sigma / 2.0,
                RatePattern::Alternating => sigma,
            };
            cfg.lane_rates.insert(*lane, rate);
        }
        cfg.duration = DurationRule::WebsterCycles(self.cycles);
        cfg.seed = self.base.seed.wrapping_add(trial as u64);
        cfg
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Box-plot summary: quartiles by linear interpolation of order statistics
/// (positions `0.25·(n−1)` and `0.75·(n−1)`, zero-indexed), whiskers at the
/// most extreme samples within 1.5·IQR of the quartiles, and everything
/// beyond the whiskers listed as outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarize a nonempty sample (order-independent).
///
/// # Panics
/// On an empty or non-finite input.
pub fn box_stats(samples: &[f64]) -> BoxStats {
    assert!(!samples.is_empty(), "box_stats needs at least one sample");
    assert!(samples.iter().all(|s| s.is_finite()), "box_stats needs finite samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let fence_low = q1 - 1.5 * iqr;
    let fence_high = q3 + 1.5 * iqr;
    let whisker_low = *sorted.iter().find(|&&s| s >= fence_low).expect("q1 is within the fence");
    let whisker_high =
        *sorted.iter().rev().find(|&&s| s <= fence_high).expect("q3 is within the fence");
    let outliers: Vec<f64> =
        sorted.iter().copied().filter(|&s| s < fence_low || s > fence_high).collect();
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    BoxStats { q1, q3, mean, whisker_low, whisker_high, outliers }
}

fn sorted_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean time to cross over vehicles that exited the zone within the run
/// (`None` when nothing crossed). Samples are sorted before summing, so the
/// result is independent of record order.
pub fn avg_ttc(records: &[VehicleRecord]) -> Option<f64> {
    sorted_mean(records.iter().filter(|r| r.crossed).filter_map(|r| r.ttc).collect())
}

/// Mean running objective over vehicles that crossed (`None` when nothing
/// crossed).
pub fn avg_objective(records: &[VehicleRecord]) -> Option<f64> {
    sorted_mean(records.iter().filter(|r| r.crossed).map(|r| r.objective).collect())
}

/// Mean total system time over vehicles that crossed: conflict-zone exit
/// minus the *requested* arrival time, so time spent deferred by the
/// admission gate counts. Under congestion an algorithm can keep its
/// admitted vehicles' crossing times short by back-pressuring admissions
/// into the un-admitted queue; this metric charges that waiting back to the
/// algorithm, making heavy-demand comparisons queue-depth-honest.
pub fn avg_system_time(records: &[VehicleRecord], arrivals: &ArrivalLog) -> Option<f64> {
    let requested: BTreeMap<VehicleId, f64> =
        arrivals.records.iter().map(|r| (r.id, r.requested_t)).collect();
    sorted_mean(
        records
            .iter()
            .filter(|r| r.crossed)
            .filter_map(|r| {
                let exit = r.t_exit?;
                Some(exit - requested.get(&r.id).expect("crossed vehicles were admitted"))
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Grid execution
// ---------------------------------------------------------------------------

/// Aggregate of one (algorithm, σ) cell over all its trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub algorithm: Algorithm,
    pub sigma: f64,
    pub trials: u32,
    /// Simulated window per trial, s.
    pub duration: f64,
    /// The exhaustive search refused a batch; metrics are absent.
    pub refused: bool,
    /// Mean over trials of each trial's average time to cross, s.
    pub avg_ttc: Option<f64>,
    /// Mean over trials of each trial's average system time (requested
    /// arrival to zone exit, gate deferral included), s.
    pub avg_system_time: Option<f64>,
    /// Crossing times pooled over all trials.
    pub ttc_stats: Option<BoxStats>,
    /// Mean over trials of each trial's average running objective.
    pub avg_objective: Option<f64>,
    /// Planned-batch sizes pooled over every round of every trial.
    pub batch_stats: Option<BoxStats>,
    /// Median over trials of (round wall time)/(vehicles planned), ms.
    /// Wall-clock: zeroed in the canonical report.
    pub time_per_vehicle_ms: Option<f64>,
    /// Admission-weighted mean realized arrival rate, veh/s/lane.
    pub realized_rate: Option<f64>,
    /// Mean over trials of (total messages)/(admitted vehicles).
    pub messages_per_vehicle: Option<f64>,
    pub messages: CommCounts,
    pub admitted: u64,
    pub crossed: u64,
}

/// Full comparison output. `quantiles` documents the box-stat convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub quantiles: String,
    pub spec: ComparisonSpec,
    pub cells: Vec<CellReport>,
}

impl ComparisonReport {
    /// Deterministic serialization: wall-clock fields zeroed, everything else
    /// bit-exact. Identical specs produce identical bytes.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        for cell in &mut c.cells {
            cell.time_per_vehicle_ms = None;
        }
        serde_json::to_string_pretty(&c).expect("report serializes")
    }

    pub fn cell(&self, algorithm: Algorithm, sigma: f64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.algorithm == algorithm && c.sigma == sigma)
    }
}

struct TrialSummary {
    refused: bool,
    avg_ttc: Option<f64>,
    avg_system_time: Option<f64>,
    avg_objective: Option<f64>,
    ttcs: Vec<f64>,
    batch_sizes: Vec<f64>,
    time_per_vehicle_ms: Option<f64>,
    realized_rate: f64,
    messages_per_vehicle: Option<f64>,
    messages: CommCounts,
    admitted: u64,
    crossed: u64,
    duration: f64,
}

fn run_trial(cfg: &RunConfig) -> Result<TrialSummary, EngineError> {
    let duration = engine::run_duration(cfg)?;
    let out = match engine::run(cfg) {
        Ok(out) => out,
        Err(EngineError::BatchRefused { .. }) => {
            return Ok(TrialSummary {
                refused: true,
                avg_ttc: None,
                avg_system_time: None,
                avg_objective: None,
                ttcs: Vec::new(),
                batch_sizes: Vec::new(),
                time_per_vehicle_ms: None,
                realized_rate: 0.0,
                messages_per_vehicle: None,
                messages: CommCounts::default(),
                admitted: 0,
                crossed: 0,
                duration,
            });
        }
        Err(e) => return Err(e),
    };
    let lanes: Vec<_> = cfg.lane_rates.keys().copied().collect();
    let rates = out.arrivals.realized_rates(&lanes, out.duration);
    let realized_rate = if lanes.is_empty() {
        0.0
    } else {
        rates.values().sum::<f64>() / lanes.len() as f64
    };
    let planned: usize = out.rounds.iter().map(|r| r.batch).sum();
    let wall: f64 = out.rounds.iter().map(|r| r.wall_ms).sum();
    let messages = out.rounds.iter().fold(CommCounts::default(), |acc, r| CommCounts {
        intra_lane: acc.intra_lane + r.messages.intra_lane,
        inter_lane: acc.inter_lane + r.messages.inter_lane,
        central: acc.central + r.messages.central,
    });
    let admitted = out.vehicles.len() as u64;
    Ok(TrialSummary {
        refused: false,
        avg_ttc: avg_ttc(&out.vehicles),
        avg_system_time: avg_system_time(&out.vehicles, &out.arrivals),
        avg_objective: avg_objective(&out.vehicles),
        ttcs: out.vehicles.iter().filter(|v| v.crossed).filter_map(|v| v.ttc).collect(),
        batch_sizes: out.rounds.iter().map(|r| r.batch as f64).collect(),
        time_per_vehicle_ms: (planned > 0).then(|| wall / planned as f64),
        realized_rate,
        messages_per_vehicle: (admitted > 0).then(|| messages.total() as f64 / admitted as f64),
        messages,
        admitted,
        crossed: out.vehicles.iter().filter(|v| v.crossed).count() as u64,
        duration: out.duration,
    })
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn aggregate_cell(
    algorithm: Algorithm,
    sigma: f64,
    trials: &[TrialSummary],
) -> CellReport {
    let refused = trials.iter().any(|t| t.refused);
    let duration = trials.first().map_or(0.0, |t| t.duration);
    if refused {
        return CellReport {
            algorithm,
            sigma,
            trials: trials.len() as u32,
            duration,
            refused: true,
            avg_ttc: None,
            avg_system_time: None,
            ttc_stats: None,
            avg_objective: None,
            batch_stats: None,
            time_per_vehicle_ms: None,
            realized_rate: None,
            messages_per_vehicle: None,
            messages: CommCounts::default(),
            admitted: 0,
            crossed: 0,
        };
    }
    let ttcs: Vec<f64> = trials.iter().flat_map(|t| t.ttcs.iter().copied()).collect();
    let batches: Vec<f64> = trials.iter().flat_map(|t| t.batch_sizes.iter().copied()).collect();
    let messages = trials.iter().fold(CommCounts::default(), |acc, t| CommCounts {
        intra_lane: acc.intra_lane + t.messages.intra_lane,
        inter_lane: acc.inter_lane + t.messages.inter_lane,
        central: acc.central + t.messages.central,
    });
    CellReport {
        algorithm,
        sigma,
        trials: trials.len() as u32,
        duration,
        refused: false,
        avg_ttc: sorted_mean(trials.iter().filter_map(|t| t.avg_ttc).collect()),
        ttc_stats: (!ttcs.is_empty()).then(|| box_stats(&ttcs)),
        avg_objective: sorted_mean(trials.iter().filter_map(|t| t.avg_objective).collect()),
        batch_stats: (!batches.is_empty()).then(|| box_stats(&batches)),
        time_per_vehicle_ms: median(trials.iter().filter_map(|t| t.time_per_vehicle_ms).collect()),
        realized_rate: sorted_mean(trials.iter().map(|t| t.realized_rate).collect()),
        messages_per_vehicle: sorted_mean(
            trials.iter().filter_map(|t| t.messages_per_vehicle).collect(),
        ),
        messages,
        admitted: trials.iter().map(|t| t.admitted).sum(),
        crossed: trials.iter().map(|t| t.crossed).sum(),
    }
}

/// Run the full grid. Trials execute in parallel; the aggregation is a
/// deterministic reduction, so two runs of the same spec agree byte for byte
/// (wall-clock fields aside).
pub fn run_comparison(spec: &ComparisonSpec) -> Result<ComparisonReport, EngineError> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for (ai, &algorithm) in spec.algorithms.iter().enumerate() {
        for (si, &sigma) in spec.sigmas.iter().enumerate() {
            for trial in 0..spec.trials {
                jobs.push((ai, si, trial, spec.cell_config(algorithm, sigma, trial)));
            }
        }
    }
    let summaries: Vec<(usize, usize, u32, Result<TrialSummary, EngineError>)> = jobs
        .into_par_iter()
        .map(|(ai, si, trial, cfg)| (ai, si, trial, run_trial(&cfg)))
        .collect();
    let mut by_cell: BTreeMap<(usize, usize), Vec<(u32, TrialSummary)>> = BTreeMap::new();
    for (ai, si, trial, res) in summaries {
        by_cell.entry((ai, si)).or_default().push((trial, res?));
    }
    let mut cells = Vec::new();
    for ((ai, si), mut trials) in by_cell {
        trials.sort_by_key(|(trial, _)| *trial);
        let ordered: Vec<TrialSummary> = trials.into_iter().map(|(_, s)| s).collect();
        cells.push(aggregate_cell(spec.algorithms[ai], spec.sigmas[si], &ordered));
    }
    Ok(ComparisonReport {
        quantiles: "linear interpolation of order statistics at 0.25*(n-1) and 0.75*(n-1); \
                    whiskers at the most extreme samples within 1.5*IQR of the quartiles"
            .to_string(),
        spec: spec.clone(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV per scalar metric: rows are σ values, columns are algorithms.
fn scalar_csv(
    report: &ComparisonReport,
    metric: impl Fn(&CellReport) -> Option<f64>,
) -> String {
    let mut s = String::from("sigma");
    for a in &report.spec.algorithms {
        s.push(',');
        s.push_str(a.name());
    }
    s.push('\n');
    for &sigma in &report.spec.sigmas {
        s.push_str(&sigma.to_string());
        for &a in &report.spec.algorithms {
            s.push(',');
            s.push_str(&fmt_opt(report.cell(a, sigma).and_then(&metric)));
        }
        s.push('\n');
    }
    s
}

/// Long-format CSV for box summaries.
fn box_csv(
    report: &ComparisonReport,
    stats: impl Fn(&CellReport) -> Option<&BoxStats>,
) -> String {
    let mut s =
        String::from("algorithm,sigma,q1,q3,mean,whisker_low,whisker_high,outliers\n");
    for cell in &report.cells {
        let Some(b) = stats(cell) else { continue };
        let outliers: Vec<String> = b.outliers.iter().map(|o| o.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.algorithm.name(),
            cell.sigma,
            b.q1,
            b.q3,
            b.mean,
            b.whisker_low,
            b.whisker_high,
            outliers.join(";")
        ));
    }
    s
}

/// Write `report.json` (canonical) plus plot-ready CSVs under
/// `out_dir/figs/`. The timing CSV carries measured wall-clock values and is
/// the only non-deterministic artifact.
pub fn write_report(report: &ComparisonReport, out_dir: &Path) -> std::io::Result<()> {
    let figs = out_dir.join("figs");
    fs::create_dir_all(&figs)?;
    fs::write(out_dir.join("report.json"), report.canonical_json())?;
    fs::write(figs.join("avg_ttc.csv"), scalar_csv(report, |c| c.avg_ttc))?;
    fs::write(figs.join("avg_objective.csv"), scalar_csv(report, |c| c.avg_objective))?;
    fs::write(
        figs.join("time_per_vehicle_ms.csv"),
        scalar_csv(report, |c| c.time_per_vehicle_ms),
    )?;
    fs::write(figs.join("realized_rate.csv"), scalar_csv(report, |c| c.realized_rate))?;
    fs::write(
        figs.join("messages_per_vehicle.csv"),
        scalar_csv(report, |c| c.messages_per_vehicle),
    )?;
    fs::write(figs.join("ttc_box.csv"), box_csv(report, |c| c.ttc_stats.as_ref()))?;
    fs::write(figs.join("batch_box.csv"), box_csv(report, |c| c.batch_stats.as_ref()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn record(id: u64, crossed: bool, ttc: Option<f64>, objective: f64) -> VehicleRecord {
        VehicleRecord {
            id,
            lane: 2,
            t_arrival: 0.0,
            t_coord: 0.0,
            t_entry: None,
            t_exit: ttc,
            crossed,
            ttc,
            objective,
        }
    }

    #[test]
    fn ttc_means_crossed_vehicles_only() {
        let one = [record(0, true, Some(8.0), 0.0)];
        assert_relative_eq!(avg_ttc(&one).unwrap(), 8.0);
        let two = [record(0, true, Some(8.0), 0.0), record(1, true, Some(12.0), 0.0)];
        assert_relative_eq!(avg_ttc(&two).unwrap(), 10.0);
        let mixed = [
            record(0, true, Some(8.0), 0.0),
            record(1, false, None, 0.0),
            record(2, true, Some(12.0), 0.0),
        ];
        assert_relative_eq!(avg_ttc(&mixed).unwrap(), 10.0);
        assert!(avg_ttc(&[record(0, false, None, 0.0)]).is_none());
        assert!(avg_ttc(&[]).is_none());
    }

    #[test]
    fn objective_means_crossed_vehicles_only() {
        // A vehicle cruising at the speed cap scores v_max * t_h = 11.11 * 30.
        let single = [record(0, true, Some(7.2), 333.3)];
        assert_relative_eq!(avg_objective(&single).unwrap(), 333.3);
        let mixed = [
            record(0, true, Some(8.0), 100.0),
            record(1, false, None, 55.0),
            record(2, true, Some(9.0), 300.0),
        ];
        assert_relative_eq!(avg_objective(&mixed).unwrap(), 200.0);
        assert!(avg_objective(&[record(0, false, None, 1.0)]).is_none());
    }

    #[test]
    fn aggregation_is_order_independent() {
        let fwd = [
            record(0, true, Some(8.25), 101.5),
            record(1, true, Some(12.5), 300.25),
            record(2, true, Some(9.75), 20.125),
        ];
        let mut rev = fwd.clone();
        rev.reverse();
        assert_eq!(avg_ttc(&fwd), avg_ttc(&rev));
        assert_eq!(avg_objective(&fwd), avg_objective(&rev));
    }

    #[test]
    fn box_stats_on_a_plain_spread() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_relative_eq!(b.q1, 2.0);
        assert_relative_eq!(b.q3, 4.0);
        assert_relative_eq!(b.mean, 3.0);
        assert_relative_eq!(b.whisker_low, 1.0);
        assert_relative_eq!(b.whisker_high, 5.0);
        assert!(b.outliers.is_empty());
    }

    #[test]
    fn box_stats_degenerate_spread() {
        let b = box_stats(&[5.0, 5.0, 5.0]);
        assert_relative_eq!(b.q1, 5.0);
        assert_relative_eq!(b.q3, 5.0);
        assert_relative_eq!(b.whisker_low, 5.0);
        assert_relative_eq!(b.whisker_high, 5.0);
        assert!(b.outliers.is_empty());
    }

    #[test]
    fn box_stats_clamps_whiskers_to_samples() {
        // Fence: q3 + 1.5*(4-2) = 7, so 100 is an outlier and the whisker
        // stops at the largest in-fence sample.
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]);
        assert_relative_eq!(b.q1, 2.0);
        assert_relative_eq!(b.q3, 4.0);
        assert_relative_eq!(b.whisker_high, 4.0);
        assert_eq!(b.outliers, vec![100.0]);
    }

    proptest! {
        #[test]
        fn box_stats_invariants(mut samples in proptest::collection::vec(-1e3..1e3f64, 1..60)) {
            let b = box_stats(&samples);
            prop_assert!(b.q1 <= b.q3 + 1e-12);
            prop_assert!(b.whisker_low <= b.whisker_high + 1e-12);
            // Whiskers are actual samples.
            prop_assert!(samples.iter().any(|&s| s == b.whisker_low));
            prop_assert!(samples.iter().any(|&s| s == b.whisker_high));
            // Every sample is inside the whiskers or listed as an outlier.
            for &s in &samples {
                let inside = s >= b.whisker_low && s <= b.whisker_high;
                let outlier = b.outliers.contains(&s);
                prop_assert!(inside != outlier, "sample {s} misplaced");
            }
            // Shuffling never changes the summary.
            samples.reverse();
            prop_assert_eq!(box_stats(&samples), b);
        }
    }

    fn tiny_spec() -> ComparisonSpec {
        let mut spec = ComparisonSpec::default();
        spec.algorithms = vec![Algorithm::Fifo];
        spec.sigmas = vec![0.05];
        spec.trials = 1;
        spec.cycles = 2;
        spec.base.seed = 7;
        spec
    }

    #[test]
    fn spec_validation_rejects_bad_grids() {
        let mut s = tiny_spec();
        s.sigmas.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.trials = 0;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.profile = Some("bogus".into());
        assert!(s.validate().is_err());
        assert!(tiny_spec().validate().is_ok());
    }

    #[test]
    fn cell_configs_resolve_pattern_profile_and_seed() {
        let mut spec = tiny_spec();
        spec.pattern = RatePattern::Alternating;
        spec.profile = Some("comfort".into());
        let cfg = spec.cell_config(Algorithm::Ddswa, 0.2, 3);
        assert_eq!(cfg.algorithm, Algorithm::Ddswa);
        assert_eq!(cfg.seed, 10);
        assert_eq!(cfg.duration, DurationRule::WebsterCycles(2));
        let rates: Vec<f64> = cfg.lane_rates.values().copied().collect();
        assert_eq!(rates, vec![0.2, 0.1, 0.2, 0.1]);
        assert_relative_eq!(cfg.weights.accel, 1.0);
        assert_relative_eq!(cfg.sched.w_w, 5.0);
    }

    #[test]
    fn comparison_runs_aggregate_and_serialize_deterministically() {
        let spec = tiny_spec();
        let report = run_comparison(&spec).unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = report.cell(Algorithm::Fifo, 0.05).unwrap();
        assert!(!cell.refused);
        assert!(cell.admitted > 0, "two cycles at 0.05 veh/s should admit someone");
        assert!(cell.crossed > 0);
        assert!(cell.avg_ttc.unwrap() >= 80.0 / 11.11 - 1e-9);
        assert!(cell.ttc_stats.is_some());
        assert!(cell.batch_stats.is_some());
        assert!(cell.messages.central > 0);
        assert!(cell.realized_rate.unwrap() > 0.0);
        // Byte determinism of the canonical report.
        let again = run_comparison(&spec).unwrap();
        assert_eq!(report.canonical_json(), again.canonical_json());

        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(json, report.canonical_json());
        let ttc_csv = std::fs::read_to_string(dir.path().join("figs/avg_ttc.csv")).unwrap();
        assert!(ttc_csv.starts_with("sigma,fifo\n0.05,"));
        for f in [
            "avg_objective.csv",
            "time_per_vehicle_ms.csv",
            "realized_rate.csv",
            "messages_per_vehicle.csv",
            "ttc_box.csv",
            "batch_box.csv",
        ] {
            assert!(dir.path().join("figs").join(f).exists(), "missing figs/{f}");
        }
    }

    #[test]
    fn refused_cells_are_marked_not_fatal() {
        let mut spec = tiny_spec();
        spec.algorithms = vec![Algorithm::Combined];
        spec.sigmas = vec![0.4];
        spec.cycles = 1;
        spec.base.max_batch = 1;
        spec.base.seed = 5;
        let report = run_comparison(&spec).unwrap();
        let cell = report.cell(Algorithm::Combined, 0.4).unwrap();
        assert!(cell.refused);
        assert!(cell.avg_ttc.is_none());
    }
}
