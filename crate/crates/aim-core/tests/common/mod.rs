//! Shared helpers for the acceptance suite: a brute-force discrete-control
//! search that lower-bounds the trajectory solver, and random instance
//! generators.

use std::collections::HashMap;

use aim_core::model::{PhysicalParams, VehicleState};
use aim_core::ocp::{BatchVehicle, ExitContext};
use aim_core::safety;
use aim_core::trajectory::ObjectiveWeights;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The five admissible accelerations of the search: both box ends, half
/// throttle each way, and coasting.
pub fn control_grid(p: &PhysicalParams) -> [f64; 5] {
    [p.u_min, p.u_min / 2.0, 0.0, p.u_max / 2.0, p.u_max]
}

/// Best running objective reachable with piecewise-constant controls from
/// `control_grid`, subject to the same sampled constraints the convex solver
/// enforces for an approach plan: velocity box, actuation box, and the
/// stop-short-of-the-line envelope at every sample.
///
/// States are merged on a 0.5 m × 0.25 m/s grid keyed together with the
/// previous control, keeping the exact (not snapped) state of the
/// best-scoring representative per cell. Every value the search returns is
/// therefore attained by an exactly feasible control sequence, so it is a
/// true lower bound on the solver's optimum.
pub fn best_discrete_objective(
    x0: f64,
    v0: f64,
    u_prev: f64,
    steps: usize,
    dt: f64,
    w: &ObjectiveWeights<f64>,
    p: &PhysicalParams,
) -> f64 {
    const DX: f64 = 0.5;
    const DV: f64 = 0.25;
    let controls = control_grid(p);
    let a = -p.u_min;
    let key = |x: f64, v: f64, ui: usize| -> (i64, i64, usize) {
        ((x / DX).round() as i64, (v / DV).round() as i64, ui)
    };
    let u_start = controls
        .iter()
        .position(|&c| (c - u_prev).abs() < 1e-12)
        .expect("u_prev drawn from the control grid");
    let mut layer: HashMap<(i64, i64, usize), (f64, f64, f64)> = HashMap::new();
    layer.insert(key(x0, v0, u_start), (0.0, x0, v0));
    for _ in 0..steps {
        let mut next: HashMap<(i64, i64, usize), (f64, f64, f64)> = HashMap::new();
        for (&(_, _, ui), &(val, x, v)) in &layer {
            for (uj, &u) in controls.iter().enumerate() {
                let v1 = v + u * dt;
                if !(p.v_min - 1e-12..=p.v_max + 1e-12).contains(&v1) {
                    continue;
                }
                let x1 = x + v * dt + 0.5 * u * dt * dt;
                // Sampled stop-envelope: still able to halt before x = 0.
                if v1 * v1 + a * dt * v1 + 2.0 * a * x1 > 1e-9 {
                    continue;
                }
                let jerk = (u - controls[ui]) / dt;
                let gain = (w.velocity * v - w.accel * u * u - w.jerk * jerk * jerk) * dt;
                let cand = (val + gain, x1, v1);
                next.entry(key(x1, v1, uj))
                    .and_modify(|best| {
                        if cand.0 > best.0 {
                            *best = cand;
                        }
                    })
                    .or_insert(cand);
            }
        }
        assert!(!next.is_empty(), "the coasting/braking controls keep a feasible state");
        layer = next;
    }
    layer.values().map(|&(val, _, _)| val).fold(f64::NEG_INFINITY, f64::max)
}

/// Sampled-form car-following gap that keeps a follower at speed `v_f`
/// admissible behind a leader at speed `v_l`.
fn required_gap(v_f: f64, v_l: f64, dt: f64, p: &PhysicalParams) -> f64 {
    safety::safe_following_distance_discrete(v_f, v_l, p.length, p.margin, p.u_min, dt)
}

/// Fastest admissible speed for a follower `gap` metres behind a leader
/// moving at `v_l` (sampled car-following form, solved for the follower).
fn speed_cap_behind(gap: f64, v_l: f64, dt: f64, p: &PhysicalParams) -> f64 {
    let a = -p.u_min;
    let slack = 2.0 * a * (gap - p.length - p.margin) + v_l * v_l;
    if slack <= 0.0 {
        return 0.0;
    }
    let adt = a * dt;
    (-adt + (adt * adt + 4.0 * slack).sqrt()) / 2.0
}

/// A random batch of jointly admissible vehicles across the four approach
/// lanes, shaped like the pools the simulation produces at a planning
/// instant: each lane's head is either queued (creeping near the stop line,
/// admitted a while ago) or flowing (mid-approach at cruising speed,
/// admitted recently), followers respect the sampled car-following gap, and
/// every state respects the stop envelope. Returns the batch plus a random
/// set of already-committed crossing windows.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    dt: f64,
    p: &PhysicalParams,
    lanes: &[u32],
) -> (Vec<BatchVehicle>, Vec<ExitContext>) {
    let n = rng.gen_range(1..=6usize);
    // Per lane: (count, x, v, t_arrival) of the rearmost member so far.
    // Arrival times grow strictly front to back along a chain — vehicles on
    // a lane are admitted in position order, and the arrival-order baseline
    // relies on that to stay a linear extension of the chains.
    let mut per_lane: HashMap<u32, (usize, f64, f64, f64)> = HashMap::new();
    let mut batch = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let lane = loop {
            let l = lanes[rng.gen_range(0..lanes.len())];
            if per_lane.get(&l).map_or(0, |c| c.0) < 3 {
                break l;
            }
        };
        let (x, v, t_arrival) = match per_lane.get(&lane) {
            None if rng.gen_bool(0.5) => {
                // Queued head: crept up to the line, waiting for a slot.
                let x = -rng.gen_range(1.5..10.0);
                let cap = safety::entry_prevention_cap_discrete(x, p.u_min, dt).min(p.v_max);
                (x, cap * rng.gen_range(0.0..0.5), -rng.gen_range(8.0..20.0))
            }
            None => {
                // Flowing head: mid-approach at cruising speed.
                let x = -rng.gen_range(15.0..55.0);
                let cap = safety::entry_prevention_cap_discrete(x, p.u_min, dt).min(p.v_max);
                (x, cap * rng.gen_range(0.6..0.95), -rng.gen_range(0.5..8.0))
            }
            Some(&(_, x_l, v_l, t_l)) => {
                let v_goal = rng.gen_range(0.0..p.v_max);
                let gap = required_gap(v_goal, v_l, dt, p) + rng.gen_range(0.5..8.0);
                let x = x_l - gap;
                let cap = safety::entry_prevention_cap_discrete(x, p.u_min, dt)
                    .min(speed_cap_behind(gap, v_l, dt, p))
                    .min(p.v_max);
                let mut t = t_l + rng.gen_range(0.1..3.0);
                if t >= 0.0 {
                    t = t_l * rng.gen_range(0.05..0.45);
                }
                (x, cap * rng.gen_range(0.5..0.95), t)
            }
        };
        per_lane
            .entry(lane)
            .and_modify(|c| *c = (c.0 + 1, x, v, t_arrival))
            .or_insert((1, x, v, t_arrival));
        batch.push(BatchVehicle {
            state: VehicleState { id, lane, x, v, u_prev: 0.0, t_arrival },
            exit_pos: 20.0,
            pred_plan: None,
        });
    }
    let committed = (0..rng.gen_range(0..=2usize))
        .map(|_| ExitContext {
            lane: lanes[rng.gen_range(0..lanes.len())],
            t_exit: rng.gen_range(0.2..3.0),
        })
        .collect();
    (batch, committed)
}
