//! Simulation engine: vehicle lifecycle, periodic coordination, trajectory
//! playback, and the post-run safety sweep.
//!
//! Each admitted vehicle owns a single control stream on the global sample
//! grid, starting at its admission instant. Every plan (provisional on
//! admission, then coordinated/hold plans at coordination instants or green
//! openings) splices into that stream at the planning instant; the executed
//! trajectory is the stream re-integrated from the admission state, so the
//! position/velocity at a splice point match the previous phase bit for bit.
//!
//! The per-step event order is fixed: admissions first, then the round or
//! green dispatch due at that step, then playback to the next step. A vehicle
//! admitted exactly at a coordination instant therefore joins that round with
//! a zero-length provisional phase.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arrivals::{ArrivalLog, PendingArrivals};
use crate::config::{Algorithm, ConfigError, DurationRule, RunConfig};
use crate::coordination::{
    combined_round, ddswa_round, fifo_round, prune_scheduled, RoundContext, RoundResult,
    ScheduleEntry,
};
use crate::model::{LaneId, VehicleId, VehicleState};
use crate::ocp::{self, BatchVehicle, ExitContext, OcpSpec, SolveStatus};
use crate::safety;
use crate::signalized::{self, SignalError, SignalPlan};
use crate::trajectory::integrate;
use crate::{IntersectionModel, Trajectory};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("signal plan: {0}")]
    Signal(#[from] SignalError),
    #[error("exhaustive search refused a batch of {size} (> max_batch {max_batch}) at t={t}")]
    BatchRefused { t: f64, size: usize, max_batch: usize },
    #[error("solver failed for vehicle {vehicle} at t={t}: {status:?}")]
    Solver { vehicle: VehicleId, t: f64, status: SolveStatus },
    #[error("safety sweep failed:\n{dump}")]
    Safety { dump: String },
}

/// Earliest coordination instant at or after an arrival: the smallest
/// multiple of the coordination period `t_coop` that is `>= t_arrival`.
pub fn assign_t_coord(t_arrival: f64, t_coop: f64) -> f64 {
    assert!(t_coop > 0.0, "coordination period must be positive");
    assert!(t_arrival >= 0.0, "arrival times are nonnegative");
    (t_arrival / t_coop - 1e-9).ceil().max(0.0) * t_coop
}

/// Message counts of one coordination round, by information channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounts {
    /// Predecessor trajectories read along a lane.
    pub intra_lane: u64,
    /// Conflicting exit windows read across lanes (unavoidable-wait inputs).
    pub inter_lane: u64,
    /// Coordinator broadcasts (weights and arrival rates), one per round.
    pub central: u64,
}

impl CommCounts {
    pub fn total(&self) -> u64 {
        self.intra_lane + self.inter_lane + self.central
    }
}

/// What one vehicle consumed during a round, for message accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleIo {
    pub vehicle: VehicleId,
    /// The solve referenced an in-lane predecessor trajectory.
    pub read_predecessor: bool,
    /// Unavoidable wait behind conflicting committed windows, s; a positive
    /// value means at least one cross-lane exit time was read.
    pub min_wait: f64,
}

/// Classify and count every information edge a round consumed: one
/// intra-lane message per predecessor trajectory read, one inter-lane message
/// per vehicle that waited on a conflicting exit window, and one central
/// broadcast for the round itself (none for an empty round).
pub fn comm_trace(batch: &[VehicleIo]) -> CommCounts {
    CommCounts {
        intra_lane: batch.iter().filter(|io| io.read_predecessor).count() as u64,
        inter_lane: batch.iter().filter(|io| io.min_wait > 0.0).count() as u64,
        central: u64::from(!batch.is_empty()),
    }
}

/// Final per-vehicle record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub lane: LaneId,
    /// Admission time, s.
    pub t_arrival: f64,
    /// First coordination opportunity (round instant, or green opening), s.
    pub t_coord: f64,
    /// Conflict-zone entry time, s (committed vehicles only).
    pub t_entry: Option<f64>,
    /// Conflict-zone exit time, s.
    pub t_exit: Option<f64>,
    /// Exited the conflict zone within the simulated window.
    pub crossed: bool,
    /// Time to cross, `t_exit - t_arrival`, s (crossed vehicles only).
    pub ttc: Option<f64>,
    /// Running objective over the evaluation window after admission
    /// (original weights, demand boosts excluded).
    pub objective: f64,
}

/// One coordination round or green dispatch event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Event ordinal.
    pub index: u64,
    /// Event time, s.
    pub t: f64,
    /// Batch size (|V_coop|): vehicles planned in this event.
    pub batch: usize,
    /// How many of them were held.
    pub held: usize,
    /// Wall-clock spent planning, ms (zeroed in canonical output).
    pub wall_ms: f64,
    pub messages: CommCounts,
}

/// Wall-clock accounting outside rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub provisional_solves: u64,
    pub provisional_wall_ms: f64,
}

/// Post-run safety sweep over every executed trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub vehicles_checked: usize,
    pub rear_end_pairs: usize,
    /// Worst follower margin over all same-lane pairs and samples, m.
    pub min_rear_end_margin: Option<f64>,
    pub overlap_pairs: usize,
    /// Worst conflict-zone co-occupancy over incompatible pairs, s.
    pub max_overlap: Option<f64>,
    pub violations: Vec<String>,
}

impl SafetyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Everything one simulation produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    /// Simulated window, s.
    pub duration: f64,
    pub vehicles: Vec<VehicleRecord>,
    pub rounds: Vec<RoundTrace>,
    pub arrivals: ArrivalLog,
    pub safety: SafetyReport,
    pub timing: TimingReport,
    /// Fixed-time plan (signal runs only).
    pub signal: Option<SignalPlan>,
}

impl RunResult {
    /// Deterministic serialization: wall-clock fields zeroed, everything else
    /// bit-exact. Two runs of the same config produce identical bytes.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        for r in &mut c.rounds {
            r.wall_ms = 0.0;
        }
        c.timing.provisional_wall_ms = 0.0;
        serde_json::to_string_pretty(&c).expect("result serializes")
    }

    /// CSV: `id,lane,t_arrival,t_coord,t_entry,t_exit,ttc,objective,crossed`.
    pub fn vehicles_csv(&self) -> String {
        let mut s = String::from("id,lane,t_arrival,t_coord,t_entry,t_exit,ttc,objective,crossed\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.vehicles {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.lane,
                r.t_arrival,
                r.t_coord,
                opt(r.t_entry),
                opt(r.t_exit),
                opt(r.ttc),
                r.objective,
                r.crossed
            ));
        }
        s
    }

    /// CSV: `index,t,batch,held,wall_ms,intra_lane,inter_lane,central`.
    pub fn rounds_csv(&self) -> String {
        let mut s = String::from("index,t,batch,held,wall_ms,intra_lane,inter_lane,central\n");
        for r in &self.rounds {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.index,
                r.t,
                r.batch,
                r.held,
                r.wall_ms,
                r.messages.intra_lane,
                r.messages.inter_lane,
                r.messages.central
            ));
        }
        s
    }
}

/// Simulated window for a config: fixed seconds, or whole cycles of the
/// Webster plan computed for the configured demand.
pub fn run_duration(cfg: &RunConfig) -> Result<f64, EngineError> {
    match cfg.duration {
        DurationRule::Seconds(s) => Ok(s),
        DurationRule::WebsterCycles(n) => {
            let plan = signalized::build_signal_plan(
                &cfg.model(),
                &cfg.lane_rates,
                cfg.saturation_flow(),
                cfg.lost_per_phase,
            )?;
            Ok(plan.cycle * n as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Live vehicle bookkeeping
// ---------------------------------------------------------------------------

struct Live {
    id: VehicleId,
    lane: LaneId,
    exit_pos: f64,
    admit_step: usize,
    t_arrival: f64,
    v_admit: f64,
    /// Control stream from the admission instant (global grid).
    u: Vec<f64>,
    /// The stream re-integrated from the admission state.
    traj: Trajectory,
    committed: bool,
    t_coord: f64,
    t_entry: Option<f64>,
    t_exit: Option<f64>,
}

impl Live {
    fn new(state: &VehicleState, exit_pos: f64, admit_step: usize, dt: f64) -> Self {
        Live {
            id: state.id,
            lane: state.lane,
            exit_pos,
            admit_step,
            t_arrival: state.t_arrival,
            v_admit: state.v,
            u: Vec::new(),
            traj: integrate(state.t_arrival, dt, state.x, state.v, &[]),
            committed: false,
            t_coord: 0.0,
            t_entry: None,
            t_exit: None,
        }
    }

    /// Replace the stream from global `step` onward and re-integrate.
    fn splice(&mut self, step: usize, new_u: &[f64], dt: f64, approach: f64) {
        let local = step - self.admit_step;
        self.u.truncate(local);
        self.u.extend_from_slice(new_u);
        self.traj = integrate(self.t_arrival, dt, -approach, self.v_admit, &self.u);
    }

    fn state_at_step(&self, step: usize) -> VehicleState {
        let local = step - self.admit_step;
        let (x, v) = self.traj.state_at_index(local);
        let u_prev = if local == 0 { 0.0 } else { self.traj.control_at_index(local - 1) };
        VehicleState { id: self.id, lane: self.lane, x, v, u_prev, t_arrival: self.t_arrival }
    }
}

// ---------------------------------------------------------------------------
// The simulation proper
// ---------------------------------------------------------------------------

struct Sim<'a> {
    cfg: &'a RunConfig,
    model: IntersectionModel,
    dt: f64,
    h_steps: usize,
    live: Vec<Live>,
    scheduled: Vec<ScheduleEntry>,
    rounds: Vec<RoundTrace>,
    log: ArrivalLog,
    next_id: VehicleId,
    timing: TimingReport,
    signal: Option<SignalPlan>,
}

impl<'a> Sim<'a> {
    /// Rearmost live vehicle per lane, as `(x, v)` at `step`.
    fn lane_tails(&self, step: usize) -> BTreeMap<LaneId, (f64, f64)> {
        let mut tails: BTreeMap<LaneId, (f64, f64)> = BTreeMap::new();
        for l in &self.live {
            let st = l.state_at_step(step);
            tails
                .entry(l.lane)
                .and_modify(|cur| {
                    if st.x < cur.0 {
                        *cur = (st.x, st.v);
                    }
                })
                .or_insert((st.x, st.v));
        }
        tails
    }

    /// Committed plan of the nearest committed vehicle ahead of `x` on
    /// `lane`, for heads whose predecessor is outside the planning batch.
    fn committed_pred_plan(&self, lane: LaneId, x: f64, step: usize) -> Option<Trajectory> {
        self.live
            .iter()
            .filter(|l| l.committed && l.lane == lane && l.state_at_step(step).x > x)
            .min_by(|a, b| {
                let xa = a.state_at_step(step).x;
                let xb = b.state_at_step(step).x;
                xa.partial_cmp(&xb).expect("finite positions")
            })
            .map(|l| l.traj.clone())
    }

    /// Any live vehicle ahead (committed or not), for provisional solves.
    fn nearest_pred_plan(&self, lane: LaneId, x: f64, step: usize) -> Option<Trajectory> {
        self.live
            .iter()
            .filter(|l| l.lane == lane && l.state_at_step(step).x > x)
            .min_by(|a, b| {
                let xa = a.state_at_step(step).x;
                let xb = b.state_at_step(step).x;
                xa.partial_cmp(&xb).expect("finite positions")
            })
            .map(|l| l.traj.clone())
    }

    /// Provisional plan from admission to the vehicle's first coordination
    /// opportunity: approach (able to stop short of the zone) behind the
    /// current plan of whoever is ahead. Zero-length phases skip the solve.
    fn plan_provisional(
        &mut self,
        live_idx: usize,
        steps: usize,
        t: f64,
    ) -> Result<(), EngineError> {
        if steps == 0 {
            return Ok(());
        }
        let l = &self.live[live_idx];
        let pred = self.nearest_pred_plan(l.lane, -self.cfg.params.approach, l.admit_step);
        let spec = OcpSpec {
            t0: t,
            dt: self.dt,
            steps,
            x0: -self.cfg.params.approach,
            v0: l.v_admit,
            u_prev: 0.0,
            weights: self.cfg.weights,
            params: self.cfg.params,
            entry_prevention: true,
            earliest_entry: None,
            exit_pos: l.exit_pos,
            require_exit_by_horizon: false,
            exit_by: None,
            predecessor: pred,
            tolerance: self.cfg.tolerance,
            max_iterations: self.cfg.max_iterations,
        };
        let start = Instant::now();
        let sol = ocp::solve(&spec);
        self.timing.provisional_wall_ms += start.elapsed().as_secs_f64() * 1e3;
        self.timing.provisional_solves += 1;
        if sol.status != SolveStatus::Optimal {
            return Err(EngineError::Solver { vehicle: self.live[live_idx].id, t, status: sol.status });
        }
        let u = sol.trajectory.expect("optimal solves carry trajectories").u;
        let (dt, approach) = (self.dt, self.cfg.params.approach);
        let admit_step = self.live[live_idx].admit_step;
        self.live[live_idx].splice(admit_step, &u, dt, approach);
        Ok(())
    }

    /// Pool of every admitted, not-yet-committed vehicle at `step`.
    fn pool_at(&self, step: usize, lane: Option<LaneId>) -> (Vec<usize>, Vec<BatchVehicle>) {
        let mut idx: Vec<usize> = self
            .live
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.committed && lane.map_or(true, |ln| l.lane == ln))
            .map(|(i, _)| i)
            .collect();
        idx.sort_by_key(|&i| self.live[i].id);
        let batch = idx
            .iter()
            .map(|&i| {
                let l = &self.live[i];
                let state = l.state_at_step(step);
                // In-pool leaders are handled by the round; only a committed
                // plan from outside the pool is passed through.
                let pred_plan = self.committed_pred_plan(l.lane, state.x, step);
                BatchVehicle { state, exit_pos: l.exit_pos, pred_plan }
            })
            .collect();
        (idx, batch)
    }

    fn apply_round(&mut self, step: usize, res: &RoundResult) {
        let (dt, approach) = (self.dt, self.cfg.params.approach);
        for p in &res.planned {
            let li = self
                .live
                .iter()
                .position(|l| l.id == p.vehicle)
                .expect("round plans only pool vehicles");
            let u = p
                .solution
                .trajectory
                .as_ref()
                .expect("planned and held solutions both carry trajectories")
                .u
                .clone();
            self.live[li].splice(step, &u, dt, approach);
            if !p.held {
                let entry = p.entry.clone().expect("non-held plans carry a crossing window");
                self.live[li].committed = true;
                self.live[li].t_entry = Some(entry.t_entry);
                self.live[li].t_exit = Some(entry.t_exit);
                self.scheduled.push(entry);
            }
        }
    }

    fn coordination_round(&mut self, t: f64, step: usize) -> Result<(), EngineError> {
        prune_scheduled(&mut self.scheduled, t);
        let (idx, batch) = self.pool_at(step, None);
        if batch.is_empty() {
            return Ok(());
        }
        let committed: Vec<ExitContext> = self
            .scheduled
            .iter()
            .map(|e| ExitContext { lane: e.lane, t_exit: e.t_exit })
            .collect();
        let ctx = RoundContext {
            t_c: t,
            dt: self.dt,
            steps: self.h_steps,
            model: &self.model,
            weights: self.cfg.weights,
            sched: self.cfg.sched,
            lane_rates: &self.cfg.lane_rates,
            tolerance: self.cfg.tolerance,
            max_iterations: self.cfg.max_iterations,
        };
        let start = Instant::now();
        let res = match self.cfg.algorithm {
            Algorithm::Ddswa => ddswa_round(&ctx, &batch, &committed),
            Algorithm::Fifo => fifo_round(&ctx, &batch, &committed),
            Algorithm::Combined => combined_round(&ctx, &batch, &committed, self.cfg.max_batch),
            Algorithm::Signal => unreachable!("signal runs dispatch on green openings"),
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if res.refused {
            return Err(EngineError::BatchRefused {
                t,
                size: batch.len(),
                max_batch: self.cfg.max_batch,
            });
        }
        let io: Vec<VehicleIo> = res
            .planned
            .iter()
            .map(|p| {
                let pool_pos = idx
                    .iter()
                    .position(|&i| self.live[i].id == p.vehicle)
                    .expect("planned vehicles come from the pool");
                let me = &batch[pool_pos];
                let has_in_pool_leader = batch
                    .iter()
                    .any(|b| b.state.lane == me.state.lane && b.state.x > me.state.x);
                VehicleIo {
                    vehicle: p.vehicle,
                    read_predecessor: has_in_pool_leader || me.pred_plan.is_some(),
                    min_wait: p.min_wait,
                }
            })
            .collect();
        self.apply_round(step, &res);
        self.rounds.push(RoundTrace {
            index: self.rounds.len() as u64,
            t,
            batch: batch.len(),
            held: res.planned.iter().filter(|p| p.held).count(),
            wall_ms,
            messages: comm_trace(&io),
        });
        Ok(())
    }

    fn green_dispatch_event(&mut self, t: f64, step: usize, phase: usize, green_end: f64) {
        let plan = self.signal.as_ref().expect("signal runs carry a plan");
        let lanes = {
            let mut l = plan.phases[phase].lanes.clone();
            l.sort_unstable();
            l
        };
        let start = Instant::now();
        let mut batch_total = 0;
        let mut held_total = 0;
        let mut io = Vec::new();
        for lane in lanes {
            let (idx, batch) = self.pool_at(step, Some(lane));
            if batch.is_empty() {
                continue;
            }
            let out = signalized::green_dispatch(
                t,
                self.dt,
                self.h_steps,
                green_end,
                &batch,
                &self.cfg.weights,
                &self.cfg.params,
                self.cfg.tolerance,
                self.cfg.max_iterations,
            );
            batch_total += batch.len();
            for (pos, s) in out.iter().enumerate() {
                let li = idx[pos];
                let u = s
                    .solution
                    .trajectory
                    .as_ref()
                    .expect("dispatched and held solutions both carry trajectories")
                    .u
                    .clone();
                let (dt, approach) = (self.dt, self.cfg.params.approach);
                self.live[li].splice(step, &u, dt, approach);
                if s.held {
                    held_total += 1;
                } else {
                    self.live[li].committed = true;
                    self.live[li].t_entry = s.t_entry;
                    self.live[li].t_exit = s.t_exit;
                    self.scheduled.push(ScheduleEntry {
                        vehicle: s.vehicle,
                        lane,
                        t_entry: s.t_entry.expect("dispatched plans enter"),
                        t_exit: s.t_exit.expect("dispatched plans exit"),
                    });
                }
                let has_in_pool_leader = batch
                    .iter()
                    .any(|b| b.state.lane == lane && b.state.x > batch[pos].state.x);
                io.push(VehicleIo {
                    vehicle: s.vehicle,
                    read_predecessor: has_in_pool_leader || batch[pos].pred_plan.is_some(),
                    min_wait: 0.0,
                });
            }
        }
        if batch_total == 0 {
            return;
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        self.rounds.push(RoundTrace {
            index: self.rounds.len() as u64,
            t,
            batch: batch_total,
            held: held_total,
            wall_ms,
            messages: comm_trace(&io),
        });
    }

    /// Post-run sweep: actuation/speed bounds per vehicle, rear-end margins
    /// for every same-lane pair, conflict-zone co-occupancy for every
    /// incompatible pair, and zone abstinence for never-committed vehicles.
    fn sweep(&self, duration: f64) -> SafetyReport {
        const TOL: f64 = 1e-6;
        let p = &self.cfg.params;
        let mut report = SafetyReport { vehicles_checked: self.live.len(), ..Default::default() };
        for l in &self.live {
            if !safety::check_bounds(&l.traj, p, TOL) {
                report
                    .violations
                    .push(format!("vehicle {}: actuation or speed bound violated", l.id));
            }
            if !l.committed {
                if let Some(&x_max) =
                    l.traj.x.iter().max_by(|a, b| a.partial_cmp(b).expect("finite"))
                {
                    if x_max > TOL {
                        report.violations.push(format!(
                            "vehicle {}: entered the zone (x={x_max:.6}) without a commitment",
                            l.id
                        ));
                    }
                }
            }
        }
        // Rear-end: same lane, earlier admission is the leader.
        for (i, follower) in self.live.iter().enumerate() {
            for leader in &self.live[..i] {
                if leader.lane != follower.lane {
                    continue;
                }
                report.rear_end_pairs += 1;
                let m = safety::rear_end_margin(
                    &follower.traj,
                    &leader.traj,
                    p.length,
                    p.margin,
                    p.u_min,
                );
                report.min_rear_end_margin =
                    Some(report.min_rear_end_margin.map_or(m, |c: f64| c.min(m)));
                if m < -TOL {
                    report.violations.push(format!(
                        "vehicles {} behind {}: rear-end margin {m:.3e} m",
                        follower.id, leader.id
                    ));
                }
            }
        }
        // Conflict-zone co-occupancy: incompatible lanes, windows measured on
        // the executed trajectories with thresholds nudged 1e-6 m inward so a
        // sample exactly on the boundary does not count as occupancy.
        let window = |l: &Live| -> Option<(f64, f64)> {
            let entry = l.traj.crossing_time(TOL)?;
            let exit = l.traj.crossing_time(l.exit_pos - TOL)?;
            Some((entry, exit))
        };
        for (i, a) in self.live.iter().enumerate() {
            let Some((ea, xa)) = window(a) else { continue };
            for b in &self.live[..i] {
                if self.model.compatibility(a.lane, b.lane).unwrap_or(1) != 0 {
                    continue;
                }
                let Some((eb, xb)) = window(b) else { continue };
                report.overlap_pairs += 1;
                let ov = safety::overlap_duration(ea, xa, eb, xb);
                report.max_overlap = Some(report.max_overlap.map_or(ov, |c: f64| c.max(ov)));
                if !safety::overlap_ok(ea, xa, eb, xb, TOL) {
                    report.violations.push(format!(
                        "vehicles {} and {}: co-occupied the zone for {ov:.3e} s",
                        a.id, b.id
                    ));
                }
            }
        }
        let _ = duration;
        report
    }

    fn finalize(self, duration: f64) -> Result<RunResult, EngineError> {
        let safety = self.sweep(duration);
        let t_h = self.cfg.horizons.t_h;
        let vehicles: Vec<VehicleRecord> = self
            .live
            .iter()
            .map(|l| {
                let crossed = l.t_exit.is_some_and(|tx| tx <= duration + 1e-9);
                VehicleRecord {
                    id: l.id,
                    lane: l.lane,
                    t_arrival: l.t_arrival,
                    t_coord: l.t_coord,
                    t_entry: l.t_entry,
                    t_exit: l.t_exit,
                    crossed,
                    ttc: if crossed { l.t_exit.map(|tx| tx - l.t_arrival) } else { None },
                    objective: l.traj.objective(&self.cfg.weights, 0.0, t_h),
                }
            })
            .collect();
        let result = RunResult {
            config: self.cfg.clone(),
            duration,
            vehicles,
            rounds: self.rounds,
            arrivals: self.log,
            safety,
            timing: self.timing,
            signal: self.signal,
        };
        if !result.safety.passed() {
            let dump = serde_json::to_string_pretty(&result.safety).expect("report serializes");
            return Err(EngineError::Safety { dump });
        }
        Ok(result)
    }
}

/// Simulate one configured run to completion.
pub fn run(cfg: &RunConfig) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    let model = cfg.model();
    let dt = cfg.dt;
    let duration = run_duration(cfg)?;
    let n_steps = (duration / dt - 1e-9).ceil().max(1.0) as usize;
    let coop_steps = (cfg.horizons.t_coop / dt).round() as usize;
    let signal = if cfg.algorithm == Algorithm::Signal {
        Some(signalized::build_signal_plan(
            &model,
            &cfg.lane_rates,
            cfg.saturation_flow(),
            cfg.lost_per_phase,
        )?)
    } else {
        None
    };
    // Green openings within the window, keyed by their grid step.
    let mut green_starts: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    if let Some(plan) = &signal {
        for phase in 0..plan.phases.len() {
            let mut cursor = 0.0;
            loop {
                let (s, e) = plan.next_green(phase, cursor, dt);
                if s >= duration - 1e-9 {
                    break;
                }
                let step = (s / dt).round() as usize;
                green_starts.entry(step).or_default().push((phase, e));
                cursor = s + dt;
            }
        }
    }

    let schedule = crate::arrivals::generate_schedule(cfg.seed, &cfg.lane_rates, duration);
    let mut pending = PendingArrivals::from_schedule(&schedule);
    let mut sim = Sim {
        cfg,
        model,
        dt,
        h_steps: cfg.horizon_steps(),
        live: Vec::new(),
        scheduled: Vec::new(),
        rounds: Vec::new(),
        log: ArrivalLog::default(),
        next_id: 0,
        timing: TimingReport::default(),
        signal,
    };

    for step in 0..n_steps {
        let t = step as f64 * dt;
        // 1. Admissions due at this step.
        let mut tails = sim.lane_tails(step);
        let mut next_id = sim.next_id;
        let admitted =
            pending.admit_due(t, dt, &mut tails, &cfg.params, &mut next_id, &mut sim.log);
        sim.next_id = next_id;
        for state in admitted {
            let exit_pos = sim
                .model
                .lane(state.lane)
                .expect("admissions use configured lanes")
                .span;
            let mut lv = Live::new(&state, exit_pos, step, dt);
            let (t_coord, p_steps) = match (&sim.signal, cfg.algorithm) {
                (Some(plan), Algorithm::Signal) => {
                    let (s, _) = plan
                        .next_green_for_lane(state.lane, t, dt)
                        .expect("configured lanes belong to a phase");
                    (s, ((s - t) / dt).round() as usize)
                }
                _ => {
                    let tc = assign_t_coord(t, cfg.horizons.t_coop);
                    let coord_step = step.div_ceil(coop_steps) * coop_steps;
                    (tc, coord_step - step)
                }
            };
            lv.t_coord = t_coord;
            sim.live.push(lv);
            let li = sim.live.len() - 1;
            sim.plan_provisional(li, p_steps, t)?;
        }
        // 2. The coordination round or green openings due at this step.
        if cfg.algorithm == Algorithm::Signal {
            if let Some(events) = green_starts.get(&step).cloned() {
                for (phase, green_end) in events {
                    sim.green_dispatch_event(t, step, phase, green_end);
                }
            }
        } else if step % coop_steps == 0 {
            sim.coordination_round(t, step)?;
        }
        // 3. Playback to the next step is implicit: every vehicle follows its
        //    committed stream.
    }

    sim.finalize(duration)
}
