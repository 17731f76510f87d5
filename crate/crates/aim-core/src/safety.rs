//! Safety formulas and trajectory checkers.
//!
//! Two families live here:
//!
//! * the *reference* formulas used by every checker and sweep: safe following
//!   distance `D(v_i, v_j) = L_j + r + max{0, (v_i^2 - v_j^2) / (2|u_min|)}`,
//!   the entry-prevention velocity cap `V(x) = sqrt(2 |u_min| (-x))`, and the
//!   pairwise conflict-zone overlap test;
//! * *discrete-invariant* variants used when generating trajectories on a
//!   sample grid. Sampled braking can only stop on grid instants, which costs
//!   up to `v dt/2` extra travel; adding `|u_min| dt v_i` inside the squared
//!   terms makes the constraint sets exactly invariant under grid-aligned
//!   braking (see the proof sketch in [`crate::ocp`]) while implying the
//!   reference forms. Checkers always verify the reference forms, so planner
//!   conservatism shows up as positive margin, never as a violation.

use crate::model::PhysicalParams;
use crate::trajectory::SampledTrajectory;
use crate::Real;

/// Default checking tolerance (m, m/s, or s depending on the check).
pub const CHECK_TOL: f64 = 1e-6;

/// Safe following distance between front bumpers: follower at `v_i` behind a
/// leader of length `len_j` at `v_j`, both limited to braking `u_min < 0`.
pub fn safe_following_distance<F: Real>(v_i: F, v_j: F, len_j: F, margin: F, u_min: F) -> F {
    let brake = -u_min;
    let diff = (v_i * v_i - v_j * v_j) / (F::of(2.0) * brake);
    len_j + margin + diff.max(F::zero())
}

/// Discrete-invariant following distance: adds the half-step travel term
/// `|u_min| dt v_i` to the follower's kinetic share.
pub fn safe_following_distance_discrete<F: Real>(
    v_i: F,
    v_j: F,
    len_j: F,
    margin: F,
    u_min: F,
    dt: F,
) -> F {
    let brake = -u_min;
    let diff = (v_i * v_i + brake * dt * v_i - v_j * v_j) / (F::of(2.0) * brake);
    len_j + margin + diff.max(F::zero())
}

/// Entry-prevention velocity cap at position `x <= 0`: the largest speed from
/// which braking at `u_min` stops before the conflict zone. Unbounded for
/// `x > 0` (the constraint is lifted once the vehicle has entered).
pub fn entry_prevention_cap<F: Real>(x: F, u_min: F) -> F {
    if x > F::zero() {
        return F::infinity();
    }
    (F::of(2.0) * (-u_min) * (-x)).sqrt()
}

/// Discrete-invariant entry cap: largest `v` with
/// `v^2 + |u_min| dt v + 2 |u_min| x <= 0`.
pub fn entry_prevention_cap_discrete<F: Real>(x: F, u_min: F, dt: F) -> F {
    if x > F::zero() {
        return F::infinity();
    }
    let a = -u_min;
    let adt = a * dt;
    ((adt * adt - F::of(8.0) * a * x).sqrt() - adt) / F::of(2.0)
}

/// Minimum rear-end margin `x_j - x_i - D(v_i, v_j)` over the follower's
/// samples that fall inside the leader's defined-or-extrapolated range.
///
/// Both trajectories must share the sample step and grid phase; the leader is
/// extrapolated at constant terminal velocity past its end.
pub fn rear_end_margin<F: Real>(
    follower: &SampledTrajectory<F>,
    leader: &SampledTrajectory<F>,
    leader_len: F,
    margin: F,
    u_min: F,
) -> F {
    debug_assert!((follower.dt - leader.dt).abs() < F::of(1e-9), "grids must share dt");
    let mut worst = F::infinity();
    for k in 0..follower.x.len() {
        let t = follower.t0 + follower.dt * F::of(k as f64);
        if t < leader.t0 - F::of(1e-9) {
            continue;
        }
        let (xj, vj) = leader.state_at(t);
        let d = safe_following_distance(follower.v[k], vj, leader_len, margin, u_min);
        let m = xj - follower.x[k] - d;
        if m < worst {
            worst = m;
        }
    }
    worst
}

/// Rear-end check at tolerance `tol`.
pub fn rear_end_ok<F: Real>(
    follower: &SampledTrajectory<F>,
    leader: &SampledTrajectory<F>,
    leader_len: F,
    margin: F,
    u_min: F,
    tol: F,
) -> bool {
    rear_end_margin(follower, leader, leader_len, margin, u_min) >= -tol
}

/// Minimum entry-prevention margin `V(x[k]) - v[k]` over samples still
/// upstream (`x <= 0`); `+inf` if no sample is upstream.
pub fn envelope_margin<F: Real>(traj: &SampledTrajectory<F>, u_min: F) -> F {
    let mut worst = F::infinity();
    for k in 0..traj.x.len() {
        if traj.x[k] <= F::zero() {
            let m = entry_prevention_cap(traj.x[k], u_min) - traj.v[k];
            if m < worst {
                worst = m;
            }
        }
    }
    worst
}

/// Minimum acceleration-bound margin `min(u - u_min, u_max - u)`.
pub fn accel_bounds_margin<F: Real>(traj: &SampledTrajectory<F>, u_min: F, u_max: F) -> F {
    let mut worst = F::infinity();
    for &u in &traj.u {
        worst = worst.min(u - u_min).min(u_max - u);
    }
    worst
}

/// Minimum velocity-bound margin `min(v - v_min, v_max - v)`.
pub fn velocity_bounds_margin<F: Real>(traj: &SampledTrajectory<F>, v_min: F, v_max: F) -> F {
    let mut worst = F::infinity();
    for &v in &traj.v {
        worst = worst.min(v - v_min).min(v_max - v);
    }
    worst
}

/// Bounds check at tolerance `tol`.
pub fn check_bounds<F: Real>(traj: &SampledTrajectory<F>, p: &PhysicalParams, tol: F) -> bool {
    accel_bounds_margin(traj, F::of(p.u_min), F::of(p.u_max)) >= -tol
        && velocity_bounds_margin(traj, F::of(p.v_min), F::of(p.v_max)) >= -tol
}

/// Conflict-zone occupancy overlap of two (entry, exit) windows, in seconds;
/// zero when one vehicle exits before the other enters.
pub fn overlap_duration<F: Real>(entry_i: F, exit_i: F, entry_k: F, exit_k: F) -> F {
    (exit_i.min(exit_k) - entry_i.max(entry_k)).max(F::zero())
}

/// Temporal-separation check: one window must end before the other begins
/// (equality allowed), within `tol` seconds.
pub fn overlap_ok<F: Real>(entry_i: F, exit_i: F, entry_k: F, exit_k: F, tol: F) -> bool {
    overlap_duration(entry_i, exit_i, entry_k, exit_k) <= tol
}

/// Admission gate: a candidate may be injected at `x = -approach` with
/// velocity `v` iff (a) `v` respects the speed limit and the entry-prevention
/// cap at the injection point, and (b) the gap to the lane tail (if any, given
/// as `(x_tail, v_tail)`) is at least the safe following distance.
///
/// Uses the discrete-invariant forms at step `dt` — the same constraints the
/// trajectory optimizer enforces — so an admitted vehicle is always a feasible
/// initial state for planning.
pub fn arrival_gate(v: f64, tail: Option<(f64, f64)>, dt: f64, p: &PhysicalParams) -> bool {
    let cap = entry_prevention_cap_discrete(-p.approach, p.u_min, dt).min(p.v_max);
    if v > cap + CHECK_TOL {
        return false;
    }
    match tail {
        None => true,
        Some((x_tail, v_tail)) => {
            let gap = x_tail + p.approach;
            gap >= safe_following_distance_discrete(v, v_tail, p.length, p.margin, p.u_min, dt)
        }
    }
}
