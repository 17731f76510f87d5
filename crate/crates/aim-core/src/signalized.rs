//! Fixed-time signalized baseline.
//!
//! Lanes are grouped into conflict-free phases by greedy coloring of the
//! compatibility relation; each phase gets a green window sized by Webster's
//! delay-minimizing timing from the per-phase critical flow ratios. The cycle
//! repeats forever from t = 0: each phase shows green first and then a lost
//! (all-red clearance) interval before the next phase begins. Vehicles may
//! occupy the conflict zone only inside their phase's green window, which is
//! snapped inward to the sample grid so entry/exit requirements land on
//! samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LaneId, PhysicalParams};
use crate::ocp::{self, BatchVehicle, OcpSpec, SequencedSolve, SolveStatus, Weights};
use crate::IntersectionModel;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    /// Total flow ratio at or above one: no finite cycle clears the demand.
    #[error("oversaturated: total flow ratio {0} >= 1")]
    Oversaturated(f64),
    #[error("invalid signal input: {0}")]
    Invalid(&'static str),
}

/// Saturation flow of one lane under the car-following limit: bumper-to-
/// bumper cruise at the speed limit, veh/s.
pub fn default_saturation_flow(p: &PhysicalParams) -> f64 {
    p.v_max / (p.length + p.margin)
}

/// Webster cycle and green splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WebsterTiming {
    /// Cycle length, s.
    pub cycle: f64,
    /// Effective green per phase, s.
    pub greens: Vec<f64>,
}

/// Webster's timing: cycle `C = (1.5 L + 5) / (1 - Y)` for total lost time
/// `L` (once per phase) and total critical flow ratio `Y`; the usable green
/// `C - L` splits proportionally to the phase flow ratios.
pub fn webster_timing(lost_per_phase: f64, flow_ratios: &[f64]) -> Result<WebsterTiming, SignalError> {
    if flow_ratios.is_empty() {
        return Err(SignalError::Invalid("need at least one phase"));
    }
    if lost_per_phase <= 0.0 {
        return Err(SignalError::Invalid("lost time must be positive"));
    }
    let y_total: f64 = flow_ratios.iter().sum();
    if y_total >= 1.0 {
        return Err(SignalError::Oversaturated(y_total));
    }
    let lost_total = lost_per_phase * flow_ratios.len() as f64;
    let cycle = (1.5 * lost_total + 5.0) / (1.0 - y_total);
    let usable = cycle - lost_total;
    let greens = if y_total > 0.0 {
        flow_ratios.iter().map(|y| usable * y / y_total).collect()
    } else {
        // No demand: split evenly.
        vec![usable / flow_ratios.len() as f64; flow_ratios.len()]
    };
    Ok(WebsterTiming { cycle, greens })
}

/// Greedy conflict-free grouping: each lane (ascending id) joins the first
/// phase whose members it can all share the zone with, else opens a new one.
pub fn phase_groups(model: &IntersectionModel) -> Vec<Vec<LaneId>> {
    let mut groups: Vec<Vec<LaneId>> = Vec::new();
    for lane in model.lanes() {
        let slot = groups.iter_mut().find(|g| {
            g.iter()
                .all(|&other| model.conflict_free(lane.id, other).unwrap_or(false))
        });
        match slot {
            Some(g) => g.push(lane.id),
            None => groups.push(vec![lane.id]),
        }
    }
    groups
}

/// One phase of the repeating plan: green over `[green_start, green_end)`
/// (offsets within a cycle), followed by the lost clearance interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPhase {
    pub lanes: Vec<LaneId>,
    /// Green opening offset from the cycle start, s.
    pub green_start: f64,
    /// Green closing offset, s.
    pub green_end: f64,
}

/// Repeating fixed-time plan starting at t = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub cycle: f64,
    pub lost_per_phase: f64,
    pub phases: Vec<SignalPhase>,
}

/// Build the plan for the model's lanes: phases by greedy grouping, timing by
/// Webster on the per-phase critical (maximum) lane flow ratio.
pub fn build_signal_plan(
    model: &IntersectionModel,
    lane_rates: &std::collections::BTreeMap<LaneId, f64>,
    saturation_flow: f64,
    lost_per_phase: f64,
) -> Result<SignalPlan, SignalError> {
    if saturation_flow <= 0.0 {
        return Err(SignalError::Invalid("saturation flow must be positive"));
    }
    let groups = phase_groups(model);
    let ratios: Vec<f64> = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|l| lane_rates.get(l).copied().unwrap_or(0.0) / saturation_flow)
                .fold(0.0f64, f64::max)
        })
        .collect();
    let timing = webster_timing(lost_per_phase, &ratios)?;
    let mut phases = Vec::with_capacity(groups.len());
    let mut offset = 0.0;
    for (lanes, green) in groups.into_iter().zip(&timing.greens) {
        phases.push(SignalPhase { lanes, green_start: offset, green_end: offset + green });
        offset += green + lost_per_phase;
    }
    Ok(SignalPlan { cycle: timing.cycle, lost_per_phase, phases })
}

/// Lanes shown green at absolute time `t` (empty during lost intervals).
/// Greens are half-open `[start, end)`, so the instant a green closes already
/// belongs to the clearance interval.
pub fn signal_step(t: f64, plan: &SignalPlan) -> Vec<LaneId> {
    let tm = t.rem_euclid(plan.cycle);
    for p in &plan.phases {
        if tm >= p.green_start - 1e-9 && tm < p.green_end - 1e-9 {
            let mut lanes = p.lanes.clone();
            lanes.sort_unstable();
            return lanes;
        }
    }
    Vec::new()
}

impl SignalPlan {
    /// Index of the phase serving `lane`.
    pub fn phase_of(&self, lane: LaneId) -> Option<usize> {
        self.phases.iter().position(|p| p.lanes.contains(&lane))
    }

    /// Earliest green window of `phase` whose grid-snapped opening is at or
    /// after `t`. Windows snap inward (opening up, closing down) so both ends
    /// are sample times; cycles whose window snaps empty are skipped.
    pub fn next_green(&self, phase: usize, t: f64, dt: f64) -> (f64, f64) {
        let p = &self.phases[phase];
        let mut k = ((t - p.green_end) / self.cycle).floor() - 1.0;
        loop {
            let raw_start = k * self.cycle + p.green_start;
            let raw_end = k * self.cycle + p.green_end;
            let start = (raw_start / dt - 1e-9).ceil() * dt;
            let end = (raw_end / dt + 1e-9).floor() * dt;
            if start >= t - 1e-9 && end > start + 1e-9 {
                return (start, end);
            }
            k += 1.0;
        }
    }

    /// Next green opening for `lane` (see [`Self::next_green`]).
    pub fn next_green_for_lane(&self, lane: LaneId, t: f64, dt: f64) -> Option<(f64, f64)> {
        self.phase_of(lane).map(|p| self.next_green(p, t, dt))
    }
}

/// Plan one lane's queue through a green window that opens at `t0` and closes
/// at `green_end` (both grid times).
///
/// Vehicles are solved front to back; each must enter no earlier than the
/// opening and exit no later than the closing, following its in-lane
/// predecessor's fresh plan (the head follows `pred_plan` if given). A
/// vehicle that cannot make the window is planned to hold short of the stop
/// line — and its followers then queue up behind that hold. Results are
/// returned in input order.
#[allow(clippy::too_many_arguments)]
pub fn green_dispatch(
    t0: f64,
    dt: f64,
    steps: usize,
    green_end: f64,
    vehicles: &[BatchVehicle],
    weights: &Weights,
    params: &PhysicalParams,
    tolerance: f64,
    max_iterations: usize,
) -> Vec<SequencedSolve> {
    let mut order: Vec<usize> = (0..vehicles.len()).collect();
    order.sort_by(|&a, &b| {
        vehicles[b]
            .state
            .x
            .partial_cmp(&vehicles[a].state.x)
            .expect("finite positions")
            .then(vehicles[a].state.id.cmp(&vehicles[b].state.id))
    });
    let mut plans: Vec<Option<crate::Trajectory>> = vec![None; vehicles.len()];
    let mut results: Vec<Option<SequencedSolve>> = (0..vehicles.len()).map(|_| None).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let veh = &vehicles[idx];
        let pred = if pos > 0 {
            plans[order[pos - 1]].clone()
        } else {
            veh.pred_plan.clone()
        };
        let spec = OcpSpec {
            t0,
            dt,
            steps,
            x0: veh.state.x,
            v0: veh.state.v,
            u_prev: veh.state.u_prev,
            weights: *weights,
            params: *params,
            entry_prevention: false,
            earliest_entry: Some(t0),
            exit_pos: veh.exit_pos,
            require_exit_by_horizon: true,
            exit_by: Some(green_end),
            predecessor: pred,
            tolerance,
            max_iterations,
        };
        let mut held = false;
        let mut solution = ocp::solve(&spec);
        if solution.status != SolveStatus::Optimal {
            held = true;
            solution = ocp::hold_trajectory(&spec);
        }
        let (t_entry, t_exit) = match (&solution.trajectory, held) {
            (Some(tr), false) => (tr.crossing_time(0.0), tr.crossing_time(veh.exit_pos)),
            _ => (None, None),
        };
        plans[idx] = solution.trajectory.clone();
        results[idx] = Some(SequencedSolve {
            vehicle: veh.state.id,
            solution,
            held,
            t_entry,
            t_exit,
        });
    }
    results.into_iter().map(|r| r.expect("every index solved")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VehicleState;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn model() -> IntersectionModel {
        IntersectionModel::default_cross(PhysicalParams::default())
    }

    fn plan_for(rate: f64) -> SignalPlan {
        let rates: BTreeMap<LaneId, f64> =
            [(2, rate), (5, rate), (8, rate), (11, rate)].into_iter().collect();
        build_signal_plan(&model(), &rates, 0.5, 4.0).unwrap()
    }

    #[test]
    fn webster_symmetric_demand() {
        let t = webster_timing(4.0, &[0.1, 0.1]).unwrap();
        assert_relative_eq!(t.cycle, 21.25, epsilon = 1e-12);
        assert_relative_eq!(t.greens[0], 6.625, epsilon = 1e-12);
        assert_relative_eq!(t.greens[1], 6.625, epsilon = 1e-12);
    }

    #[test]
    fn webster_asymmetric_demand_splits_proportionally() {
        let t = webster_timing(4.0, &[0.2, 0.1]).unwrap();
        assert_relative_eq!(t.cycle, 17.0 / 0.7, epsilon = 1e-9);
        let usable = t.cycle - 8.0;
        assert_relative_eq!(usable, 16.285714285714285, epsilon = 1e-9);
        assert_relative_eq!(t.greens[0], usable * 2.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(t.greens[1], usable / 3.0, epsilon = 1e-9);
        assert_relative_eq!(t.greens[0] / t.greens[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn webster_rejects_oversaturation() {
        assert_eq!(
            webster_timing(4.0, &[0.6, 0.5]).unwrap_err(),
            SignalError::Oversaturated(1.1)
        );
    }

    #[test]
    fn webster_no_demand_limit() {
        let t = webster_timing(4.0, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(t.cycle, 17.0, epsilon = 1e-12);
        assert_relative_eq!(t.greens[0], 4.5, epsilon = 1e-12);
        assert_relative_eq!(t.greens[1], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn phases_pair_opposite_lanes() {
        let groups = phase_groups(&model());
        assert_eq!(groups, vec![vec![2, 8], vec![5, 11]]);
    }

    #[test]
    fn car_following_saturation_flow() {
        let s = default_saturation_flow(&PhysicalParams::default());
        assert_relative_eq!(s, 11.11 / 4.5, epsilon = 1e-12);
        assert!(s > 2.46 && s < 2.47);
    }

    #[test]
    fn plan_lays_out_green_then_clearance() {
        let plan = plan_for(0.05);
        assert_relative_eq!(plan.cycle, 21.25, epsilon = 1e-12);
        assert_relative_eq!(plan.phases[0].green_start, 0.0, epsilon = 1e-12);
        assert_relative_eq!(plan.phases[0].green_end, 6.625, epsilon = 1e-12);
        assert_relative_eq!(plan.phases[1].green_start, 10.625, epsilon = 1e-12);
        assert_relative_eq!(plan.phases[1].green_end, 17.25, epsilon = 1e-12);
        assert_eq!(plan.phase_of(2), Some(0));
        assert_eq!(plan.phase_of(11), Some(1));
        // Greens plus clearances tile the whole cycle.
        let total: f64 = plan
            .phases
            .iter()
            .map(|p| p.green_end - p.green_start + plan.lost_per_phase)
            .sum();
        assert_relative_eq!(total, plan.cycle, epsilon = 1e-12);
    }

    #[test]
    fn step_reports_green_lanes_and_clearances() {
        let plan = plan_for(0.05);
        assert_eq!(signal_step(0.0, &plan), vec![2, 8]);
        // Green close is exclusive: the closing instant is already clearance.
        assert_eq!(signal_step(6.625, &plan), Vec::<LaneId>::new());
        assert_eq!(signal_step(10.625, &plan), vec![5, 11]);
        assert_eq!(signal_step(18.0, &plan), Vec::<LaneId>::new());
        // Periodic: one full cycle later looks identical.
        assert_eq!(signal_step(plan.cycle, &plan), signal_step(0.0, &plan));
    }

    #[test]
    fn green_windows_snap_inward_to_the_grid() {
        let plan = plan_for(0.05);
        let dt = 0.1;
        // First cycle: raw (0.0, 6.625) -> snapped (0.0, 6.6).
        let (s, e) = plan.next_green(0, 0.0, dt);
        assert_relative_eq!(s, 0.0, epsilon = 1e-9);
        assert_relative_eq!(e, 6.6, epsilon = 1e-9);
        // Mid-green rolls to the next cycle: raw (21.25, 27.875) -> (21.3, 27.8).
        let (s, e) = plan.next_green(0, 0.05, dt);
        assert_relative_eq!(s, 21.3, epsilon = 1e-9);
        assert_relative_eq!(e, 27.8, epsilon = 1e-9);
        // Other phase: raw (10.625, 17.25) -> (10.7, 17.2).
        let (s, e) = plan.next_green_for_lane(5, 0.0, dt).unwrap();
        assert_relative_eq!(s, 10.7, epsilon = 1e-9);
        assert_relative_eq!(e, 17.2, epsilon = 1e-9);
        // Snapped ends are sample times.
        assert_relative_eq!((s / dt).round() * dt, s, epsilon = 1e-9);
        assert_relative_eq!((e / dt).round() * dt, e, epsilon = 1e-9);
        // Openings are inclusive: asking at the opening returns that window.
        let (s, _) = plan.next_green(0, 21.3, dt);
        assert_relative_eq!(s, 21.3, epsilon = 1e-9);
    }

    fn queued(id: u64, x: f64) -> BatchVehicle {
        BatchVehicle {
            state: VehicleState { id, lane: 2, x, v: 0.0, u_prev: 0.0, t_arrival: 0.0 },
            exit_pos: 20.0,
            pred_plan: None,
        }
    }

    #[test]
    fn empty_lane_dispatches_nothing() {
        let out = green_dispatch(
            0.0,
            0.1,
            300,
            6.6,
            &[],
            &Weights::new(1.0, 0.0, 0.0),
            &PhysicalParams::default(),
            1e-6,
            200,
        );
        assert!(out.is_empty());
    }

    #[test]
    fn stopped_vehicle_crosses_within_its_green() {
        let out = green_dispatch(
            0.0,
            0.1,
            300,
            6.6,
            &[queued(1, -4.5)],
            &Weights::new(1.0, 0.0, 0.0),
            &PhysicalParams::default(),
            1e-6,
            200,
        );
        assert_eq!(out.len(), 1);
        assert!(!out[0].held);
        assert_eq!(out[0].solution.status, SolveStatus::Optimal);
        let entry = out[0].t_entry.unwrap();
        let exit = out[0].t_exit.unwrap();
        assert!(entry >= -1e-9, "entry {entry} before green opening");
        assert!(exit <= 6.6 + 1e-6, "exit {exit} after green closing");
        // From rest, 24.5 m at u_max=3 and the speed cap takes about 4.1 s.
        assert!(exit > 3.5 && exit < 5.0, "exit {exit} kinematically implausible");
    }

    #[test]
    fn short_green_dispatches_the_head_and_holds_the_tail() {
        let queue: Vec<BatchVehicle> =
            (0..10).map(|k| queued(k, -4.5 - 5.0 * k as f64)).collect();
        let out = green_dispatch(
            0.0,
            0.1,
            300,
            6.6,
            &queue,
            &Weights::new(1.0, 0.0, 0.0),
            &PhysicalParams::default(),
            1e-6,
            200,
        );
        let dispatched: Vec<_> = out.iter().filter(|s| !s.held).collect();
        let held: Vec<_> = out.iter().filter(|s| s.held).collect();
        assert!(!dispatched.is_empty(), "head of queue should make the green");
        assert!(!held.is_empty(), "a 10-deep queue cannot clear a 6.6 s green");
        assert!(dispatched.iter().any(|s| s.vehicle == 0));
        for s in &dispatched {
            assert!(s.t_entry.unwrap() >= -1e-9);
            assert!(s.t_exit.unwrap() <= 6.6 + 1e-6);
        }
        for s in &held {
            assert!(s.t_entry.is_none() && s.t_exit.is_none());
            // Holds stay short of the stop line for the whole horizon.
            let traj = s.solution.trajectory.as_ref().unwrap();
            assert!(traj.x.iter().all(|&x| x <= 1e-9));
        }
    }
}
