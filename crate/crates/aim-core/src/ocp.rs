//! Convex trajectory optimization for one vehicle over a uniform grid.
//!
//! The decision freedom is the piecewise-constant acceleration stream
//! `u[0..N]`; velocities and positions are tied to it by the exact step
//! recursion of [`crate::trajectory::integrate`]. The solver maximizes
//!
//! ```text
//! sum_k (W_v v[k] - W_a u[k]^2 - W_j j[k]^2) dt        (left Riemann)
//! ```
//!
//! subject to, per sample: acceleration and velocity bounds, the
//! entry-prevention envelope (optional), the rear-end constraint against a
//! fixed predecessor trajectory (optional), an earliest-entry prefix
//! `x[k] <= 0`, and an exit requirement `x >= exit_pos` at the horizon or at
//! a deadline sample. All constraints are convex (the squared-velocity terms
//! make the rear-end and envelope rows convex quadratics), so the problem is
//! solved to global optimality by a primal-dual interior-point method.
//!
//! # Discrete-invariant constraint forms
//!
//! On a sample grid, braking can only change at grid instants, so a vehicle
//! with `0 < v < |u_min| dt` cannot stop without a partial final step that
//! travels an extra `v dt / 2`. The envelope and rear-end rows therefore use
//! the strengthened kinetic term `v^2 + |u_min| dt v` instead of `v^2`
//! (see [`crate::safety`]). Writing `a = |u_min|` and
//! `F = v^2 + a dt v + 2 a x`, one step of grid braking
//! (`u = max(u_min, -v/dt)`) gives `F' = F - a^2 dt^2` while `v >= a dt` and
//! `F' = F - v^2` below, so `F <= 0` is exactly invariant and every state the
//! solver commits admits a feasible braking continuation — the plain sampled
//! form `v^2 + 2 a x <= 0` does not have this property and strands vehicles
//! at the stop line. The same correction keeps the paired rear-end rows
//! (`gap >= L + r` and `gap >= L + r + (v_i^2 + a dt v_i - v_j^2)/(2a)`)
//! jointly invariant under braking behind any feasible predecessor plan.
//!
//! # Elastic relaxation
//!
//! Stopped queues pin states exactly onto constraint boundaries (a parked
//! follower at minimal gap has a one-point feasible set), which destroys the
//! strict interior a barrier method needs. Every state constraint is therefore
//! relaxed by a shared elastic `xi_s >= 0` carrying a penalty that dominates
//! any achievable objective gain; at optimality `xi_s` is numerically zero
//! (order `mu / penalty`). The exit requirement gets its own elastic
//! `xi_e >= 0`: a converged solution with `xi_e` above threshold *is* the
//! proof of infeasibility that triggers the hold fallback, so no separate
//! phase-one solve is needed.
//!
//! The Newton systems are assembled in an interleaved per-step ordering
//! `[u_k, v_{k+1}, nu_v, x_{k+1}, nu_x]` giving a symmetric quasi-definite
//! band of half-bandwidth 8 (factored by [`crate::banded`]); the two elastic
//! columns are dense and handled as a bordered 2x2 Schur complement.

use serde::{Deserialize, Serialize};

use crate::banded::BandMatrix;
use crate::model::{LaneId, PhysicalParams, VehicleId, VehicleState};
use crate::trajectory::{integrate, ObjectiveWeights, SampledTrajectory};
use crate::IntersectionModel;

/// Running-cost weights over the crate scalar.
pub type Weights = ObjectiveWeights<f64>;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;

/// Extra metres required beyond the exit line so interpolated crossing times
/// always exist strictly inside the horizon.
pub const EXIT_MARGIN: f64 = 1e-4;

/// Penalty on the shared state elastic (must dominate `M_EXIT`).
const M_SAFE: f64 = 1e7;
/// Penalty on the exit elastic (must dominate the objective gradient).
const M_EXIT: f64 = 1e5;
/// Exit shortfall above which the problem is declared infeasible, m.
const INFEASIBLE_XI: f64 = 1e-4;
/// Absolute feasibility target for constraint rows.
const FEAS_TOL: f64 = 1e-7;
/// Tolerance for the initial-state prechecks.
const PRECHECK_TOL: f64 = 1e-6;
/// Static regularization (primal / dual) for quasi-definiteness.
const REG_P: f64 = 1e-8;
const REG_D: f64 = 1e-8;

/// One-vehicle problem statement.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    /// Grid origin (absolute simulation time), s.
    pub t0: f64,
    /// Sample step, s.
    pub dt: f64,
    /// Number of control steps `N` (>= 1); the horizon is `N dt`.
    pub steps: usize,
    /// Initial position, m.
    pub x0: f64,
    /// Initial velocity, m/s.
    pub v0: f64,
    /// Acceleration applied over the step before `t0` (jerk reference).
    pub u_prev: f64,
    pub weights: Weights,
    pub params: PhysicalParams,
    /// Enforce the entry-prevention envelope at every sample.
    pub entry_prevention: bool,
    /// Keep `x <= 0` at every sample up to this absolute time (ceiled to the
    /// grid), so the interpolated entry time is never earlier.
    pub earliest_entry: Option<f64>,
    /// Exit line for the exit requirements, m.
    pub exit_pos: f64,
    /// Require `x[N] >= exit_pos`.
    pub require_exit_by_horizon: bool,
    /// Require exit by this absolute time (floored to the grid).
    pub exit_by: Option<f64>,
    /// Committed plan of the immediate predecessor on the same lane, sharing
    /// the grid phase (extrapolated at constant velocity where shorter).
    pub predecessor: Option<SampledTrajectory<f64>>,
    /// Convergence tolerance on the scaled KKT residuals.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl OcpSpec {
    /// Spec with no side constraints: cruise freely from `(x0, v0)`.
    pub fn free(t0: f64, dt: f64, steps: usize, x0: f64, v0: f64, weights: Weights, params: PhysicalParams) -> Self {
        Self {
            t0,
            dt,
            steps,
            x0,
            v0,
            u_prev: 0.0,
            weights,
            params,
            entry_prevention: false,
            earliest_entry: None,
            exit_pos: 0.0,
            require_exit_by_horizon: false,
            exit_by: None,
            predecessor: None,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Converged with all constraints met: the trajectory is committed-ready.
    Optimal,
    /// No trajectory satisfies the exit requirement (or the initial state
    /// violates a sample-zero constraint); callers fall back to a hold.
    Infeasible,
    /// Iteration cap hit before convergence (bug trap; never expected).
    IterLimit,
    /// Hold solve stalled on a degenerate parked face (stationary at a stop
    /// point, where the feasible set has no interior for the barrier); the
    /// returned trajectory is the maximal-braking standstill, feasibility-
    /// checked but not optimality-certified.
    Fallback,
}

/// Solver output. `trajectory` is present iff the status is `Optimal` or
/// `Fallback`; it is re-integrated from the control stream, so it satisfies
/// the step recursion exactly.
#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub status: SolveStatus,
    pub trajectory: Option<SampledTrajectory<f64>>,
    /// Running objective of the returned trajectory over the solve horizon.
    pub objective: f64,
    /// Scaled max-norm KKT residual at the returned iterate.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Converged state-elastic value (numerical-degeneracy relief), m-ish.
    pub xi_safety: f64,
    /// Converged exit shortfall, m (drives the `Infeasible` status).
    pub xi_exit: f64,
}

impl OcpSolution {
    fn failed(status: SolveStatus) -> Self {
        Self {
            status,
            trajectory: None,
            objective: f64::NEG_INFINITY,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            xi_safety: 0.0,
            xi_exit: 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

/// Variable layout: per step `k`, slots `[u_k, v_{k+1}, nu_v_k, x_{k+1},
/// nu_x_k]`. Multiplier slots sit after the state they introduce so the
/// signed pivots of the quasi-definite factorization never vanish.
#[inline]
fn iu(k: usize) -> usize {
    5 * k
}
#[inline]
fn iv(k: usize) -> usize {
    5 * k + 1
}
#[inline]
fn imv(k: usize) -> usize {
    5 * k + 2
}
#[inline]
fn ix(k: usize) -> usize {
    5 * k + 3
}
#[inline]
fn imx(k: usize) -> usize {
    5 * k + 4
}

const HBW: usize = 8;

/// One inequality row `c1 z + c2 z + q z_q^2 + b xi + r <= 0`.
#[derive(Clone, Copy, Debug)]
struct Ineq {
    c1: Option<(usize, f64)>,
    c2: Option<(usize, f64)>,
    /// Quadratic term: coefficient `q` on `z[col]^2`.
    quad: Option<(usize, f64)>,
    /// Border (elastic) term: `(border index, coefficient)`.
    border: Option<(usize, f64)>,
    r: f64,
}

impl Ineq {
    fn eval(&self, w: &[f64], xi: &[f64]) -> f64 {
        let mut g = self.r;
        if let Some((c, a)) = self.c1 {
            g += a * w[c];
        }
        if let Some((c, a)) = self.c2 {
            g += a * w[c];
        }
        if let Some((c, q)) = self.quad {
            g += q * w[c] * w[c];
        }
        if let Some((b, a)) = self.border {
            g += a * xi[b];
        }
        g
    }

    /// Core-variable gradient entries (up to 3).
    fn grad(&self, w: &[f64], out: &mut [(usize, f64); 3]) -> usize {
        let mut n = 0;
        if let Some((c, a)) = self.c1 {
            out[n] = (c, a);
            n += 1;
        }
        if let Some((c, a)) = self.c2 {
            out[n] = (c, a);
            n += 1;
        }
        if let Some((c, q)) = self.quad {
            out[n] = (c, 2.0 * q * w[c]);
            n += 1;
        }
        n
    }
}

struct Problem {
    dim: usize,
    nb: usize,
    /// Quadratic objective band (primal slots only) and linear cost.
    h_band: BandMatrix<f64>,
    c: Vec<f64>,
    c_border: [f64; 2],
    /// Equality rows as `(multiplier slot, column, coefficient)`.
    eq: Vec<(usize, usize, f64)>,
    eq_rhs: Vec<f64>, // indexed by multiplier slot (dense over dim, zero elsewhere)
    ineqs: Vec<Ineq>,
    c_inf: f64,
    rhs_inf: f64,
}

fn build_problem(spec: &OcpSpec) -> Problem {
    let n = spec.steps;
    let dim = 5 * n;
    let dt = spec.dt;
    let p = &spec.params;
    let a = p.braking();

    // --- Objective (minimization form: negate the reward). ---
    let mut h_band = BandMatrix::zeros(dim, HBW);
    let mut c = vec![0.0; dim];
    let wv = spec.weights.velocity;
    let wa = spec.weights.accel;
    let wj = spec.weights.jerk;
    for k in 0..n {
        let mut diag = 2.0 * wa * dt + 2.0 * wj / dt;
        if k + 1 < n {
            diag += 2.0 * wj / dt;
        }
        if diag != 0.0 {
            h_band.add(iu(k), iu(k), diag);
        }
        if k > 0 && wj != 0.0 {
            h_band.add(iu(k), iu(k - 1), -2.0 * wj / dt);
        }
    }
    if wj != 0.0 {
        c[iu(0)] -= 2.0 * (wj / dt) * spec.u_prev;
    }
    // v_k for k = 1..N-1 earns W_v dt (left Riemann skips v_N; v_0 is data).
    for k in 1..n {
        c[iv(k - 1)] = -wv * dt;
    }

    // --- Equalities: exact step recursion. ---
    let mut eq = Vec::with_capacity(7 * n);
    let mut eq_rhs = vec![0.0; dim];
    for k in 0..n {
        // v_{k+1} - v_k - dt u_k = [k == 0] v0
        eq.push((imv(k), iv(k), 1.0));
        eq.push((imv(k), iu(k), -dt));
        if k == 0 {
            eq_rhs[imv(0)] = spec.v0;
        } else {
            eq.push((imv(k), iv(k - 1), -1.0));
        }
        // x_{k+1} - x_k - dt v_k - dt^2/2 u_k = [k == 0] (x0 + dt v0)
        eq.push((imx(k), ix(k), 1.0));
        eq.push((imx(k), iu(k), -0.5 * dt * dt));
        if k == 0 {
            eq_rhs[imx(0)] = spec.x0 + dt * spec.v0;
        } else {
            eq.push((imx(k), ix(k - 1), -1.0));
            eq.push((imx(k), iv(k - 1), -dt));
        }
    }

    // --- Inequalities. ---
    let has_exit = spec.require_exit_by_horizon || spec.exit_by.is_some();
    let nb = if has_exit { 2 } else { 1 };
    let soft = Some((0usize, -1.0));
    let mut ineqs = Vec::new();
    let pred: Option<Vec<(f64, f64)>> = spec.predecessor.as_ref().map(|pl| {
        (1..=n)
            .map(|k| pl.state_at(spec.t0 + dt * k as f64))
            .collect()
    });
    let k_entry = spec.earliest_entry.map(|te| {
        let steps = ((te - spec.t0) / dt - 1e-9).ceil().max(0.0) as usize;
        steps.min(n)
    });
    for k in 1..=n {
        let (sv, sx) = (iv(k - 1), ix(k - 1));
        // velocity bounds
        ineqs.push(Ineq { c1: Some((sv, -1.0)), c2: None, quad: None, border: soft, r: p.v_min });
        ineqs.push(Ineq { c1: Some((sv, 1.0)), c2: None, quad: None, border: soft, r: -p.v_max });
        // entry-prevention envelope: v^2 + a dt v + 2 a x <= 0
        if spec.entry_prevention {
            ineqs.push(Ineq {
                c1: Some((sv, a * dt)),
                c2: Some((sx, 2.0 * a)),
                quad: Some((sv, 1.0)),
                border: soft,
                r: 0.0,
            });
        }
        // rear-end pair against the predecessor sample
        if let Some(ref ps) = pred {
            let (px, pv) = ps[k - 1];
            let head = px - p.length - p.margin;
            ineqs.push(Ineq { c1: Some((sx, 1.0)), c2: None, quad: None, border: soft, r: -head });
            ineqs.push(Ineq {
                c1: Some((sx, 1.0)),
                c2: Some((sv, 0.5 * dt)),
                quad: Some((sv, 1.0 / (2.0 * a))),
                border: soft,
                r: -head - pv * pv / (2.0 * a),
            });
        }
        // earliest-entry prefix
        if let Some(ke) = k_entry {
            if k <= ke {
                ineqs.push(Ineq { c1: Some((sx, 1.0)), c2: None, quad: None, border: soft, r: 0.0 });
            }
        }
    }
    // acceleration box (hard)
    for k in 0..n {
        ineqs.push(Ineq { c1: Some((iu(k), 1.0)), c2: None, quad: None, border: None, r: -p.u_max });
        ineqs.push(Ineq { c1: Some((iu(k), -1.0)), c2: None, quad: None, border: None, r: p.u_min });
    }
    // exit requirement with its own elastic
    if has_exit {
        let k_exit = match spec.exit_by {
            Some(td) => ((td - spec.t0) / dt + 1e-9).floor().min(n as f64) as usize,
            None => n,
        };
        // k_exit >= 1 is guaranteed by the prechecks.
        ineqs.push(Ineq {
            c1: Some((ix(k_exit - 1), -1.0)),
            c2: None,
            quad: None,
            border: Some((1, -1.0)),
            r: spec.exit_pos + EXIT_MARGIN,
        });
    }
    // elastic nonnegativity (hard)
    for b in 0..nb {
        ineqs.push(Ineq { c1: None, c2: None, quad: None, border: Some((b, -1.0)), r: 0.0 });
    }

    let c_inf = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rhs_inf = eq_rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Problem {
        dim,
        nb,
        h_band,
        c,
        c_border: [M_SAFE, M_EXIT],
        eq,
        eq_rhs,
        ineqs,
        c_inf,
        rhs_inf,
    }
}

// ---------------------------------------------------------------------------
// Interior-point method
// ---------------------------------------------------------------------------

struct IpmOut {
    w: Vec<f64>,
    xi: [f64; 2],
    iterations: usize,
    kkt_residual: f64,
    converged: bool,
}

fn max_step(vals: &[f64], deltas: &[f64]) -> f64 {
    let mut a = 1.0f64;
    for (v, d) in vals.iter().zip(deltas) {
        if *d < 0.0 {
            a = a.min(-v / d);
        }
    }
    a
}

/// Solve the bordered system `[band B; B' S] [dz; dxi] = [rz; rxi]` with one
/// step of iterative refinement against the unregularized operator.
struct Bordered<'a> {
    factored: BandMatrix<f64>,
    truth: &'a BandMatrix<f64>,
    b_cols: &'a [Vec<f64>],
    s_true: [[f64; 2]; 2],
    /// `band^{-1} B` columns and the factored 2x2 Schur complement.
    w_cols: Vec<Vec<f64>>,
    schur: [[f64; 2]; 2],
    nb: usize,
}

impl<'a> Bordered<'a> {
    fn new(
        mut reg: BandMatrix<f64>,
        truth: &'a BandMatrix<f64>,
        b_cols: &'a [Vec<f64>],
        s_diag: [[f64; 2]; 2],
        nb: usize,
    ) -> Result<Self, &'static str> {
        reg.factor_ldl()?;
        let mut w_cols = Vec::with_capacity(nb);
        for col in b_cols.iter().take(nb) {
            let mut w = col.clone();
            reg.solve_in_place(&mut w);
            w_cols.push(w);
        }
        // Schur = S_reg - B' W  (S_reg carries the +REG_P diagonal).
        let mut schur = [[0.0; 2]; 2];
        for i in 0..nb {
            for j in 0..nb {
                let mut dot = 0.0;
                for (bv, wv) in b_cols[i].iter().zip(&w_cols[j]) {
                    dot += bv * wv;
                }
                schur[i][j] = s_diag[i][j] + if i == j { REG_P } else { 0.0 } - dot;
            }
        }
        Ok(Self { factored: reg, truth, b_cols, s_true: s_diag, w_cols, schur, nb })
    }

    fn solve_once(&self, rz: &[f64], rxi: &[f64; 2], dz: &mut Vec<f64>, dxi: &mut [f64; 2]) {
        *dz = rz.to_vec();
        self.factored.solve_in_place(dz);
        let mut rhs = [0.0f64; 2];
        for b in 0..self.nb {
            let mut dot = 0.0;
            for (bv, yv) in self.b_cols[b].iter().zip(dz.iter()) {
                dot += bv * yv;
            }
            rhs[b] = rxi[b] - dot;
        }
        *dxi = [0.0; 2];
        match self.nb {
            1 => dxi[0] = rhs[0] / self.schur[0][0],
            2 => {
                let det = self.schur[0][0] * self.schur[1][1] - self.schur[0][1] * self.schur[1][0];
                dxi[0] = (rhs[0] * self.schur[1][1] - rhs[1] * self.schur[0][1]) / det;
                dxi[1] = (self.schur[0][0] * rhs[1] - self.schur[1][0] * rhs[0]) / det;
            }
            _ => {}
        }
        for b in 0..self.nb {
            for (z, w) in dz.iter_mut().zip(&self.w_cols[b]) {
                *z -= w * dxi[b];
            }
        }
    }

    /// Residual of the *unregularized* system for refinement.
    fn true_residual(
        &self,
        rz: &[f64],
        rxi: &[f64; 2],
        dz: &[f64],
        dxi: &[f64; 2],
        out_z: &mut Vec<f64>,
        out_xi: &mut [f64; 2],
    ) {
        self.truth.mul_vec(dz, out_z);
        for (o, r) in out_z.iter_mut().zip(rz) {
            *o = r - *o;
        }
        for b in 0..self.nb {
            for (o, bv) in out_z.iter_mut().zip(&self.b_cols[b]) {
                *o -= bv * dxi[b];
            }
        }
        for b in 0..self.nb {
            let mut dot = 0.0;
            for (bv, zv) in self.b_cols[b].iter().zip(dz) {
                dot += bv * zv;
            }
            for j in 0..self.nb {
                dot += self.s_true[b][j] * dxi[j];
            }
            out_xi[b] = rxi[b] - dot;
        }
    }

    fn solve_refined(&self, rz: &[f64], rxi: &[f64; 2]) -> (Vec<f64>, [f64; 2]) {
        let mut dz = Vec::new();
        let mut dxi = [0.0; 2];
        self.solve_once(rz, rxi, &mut dz, &mut dxi);
        let mut res_z = vec![0.0; rz.len()];
        let mut res_xi = [0.0; 2];
        self.true_residual(rz, rxi, &dz, &dxi, &mut res_z, &mut res_xi);
        let mut cz = Vec::new();
        let mut cxi = [0.0; 2];
        self.solve_once(&res_z, &res_xi, &mut cz, &mut cxi);
        for (d, c) in dz.iter_mut().zip(&cz) {
            *d += c;
        }
        for b in 0..self.nb {
            dxi[b] += cxi[b];
        }
        (dz, dxi)
    }
}

fn ipm(prob: &Problem, spec: &OcpSpec) -> IpmOut {
    let dim = prob.dim;
    let nb = prob.nb;
    let m = prob.ineqs.len();
    let eta = 0.995f64;

    // Start: zero acceleration (exact dynamics). The elastics are lifted
    // until every soft row is strictly feasible, and (s, lambda) starts
    // perfectly centered, so the first affine direction is well-scaled even
    // for wildly infeasible nominal trajectories.
    let mut w = vec![0.0; dim];
    for k in 0..spec.steps {
        w[iv(k)] = spec.v0;
        w[ix(k)] = spec.x0 + spec.dt * spec.v0 * (k + 1) as f64;
    }
    let mut xi = [0.0f64, 0.0];
    for q in &prob.ineqs {
        if let Some((b, _)) = q.border {
            let hard = q.eval(&w, &[0.0, 0.0]);
            xi[b] = xi[b].max(hard);
        }
    }
    for b in 0..nb {
        xi[b] += 1.0;
    }
    let mut s = vec![0.0; m];
    let mut lam = vec![1.0; m];
    for (i, q) in prob.ineqs.iter().enumerate() {
        s[i] = (-q.eval(&w, &xi)).max(1e-3);
        lam[i] = 1.0 / s[i];
    }

    let mut g = vec![0.0; m];
    let mut grads: Vec<([(usize, f64); 3], usize)> = vec![([(0, 0.0); 3], 0); m];
    let mut kkt_residual = f64::INFINITY;
    let trace = std::env::var_os("AIM_IPM_TRACE").is_some();

    let is_primal = |slot: usize| -> bool { !matches!(slot % 5, 2 | 4) };

    for iter in 0..spec.max_iterations {
        // Constraint values and gradients at the current point.
        for (i, q) in prob.ineqs.iter().enumerate() {
            g[i] = q.eval(&w, &xi);
            let nterms = q.grad(&w, &mut grads[i].0);
            grads[i].1 = nterms;
        }

        // Residuals of the true KKT system.
        let mut r_stat = vec![0.0; dim];
        prob.h_band.mul_vec(&w, &mut r_stat); // H z (H lives on primal slots only)
        for (i, rv) in r_stat.iter_mut().enumerate() {
            *rv += prob.c[i];
        }
        let mut r_eq = vec![0.0; dim];
        for &(row, col, a) in &prob.eq {
            r_stat[col] += a * w[row]; // A' nu
            r_eq[row] += a * w[col];
        }
        for k in 0..spec.steps {
            r_eq[imv(k)] -= prob.eq_rhs[imv(k)];
            r_eq[imx(k)] -= prob.eq_rhs[imx(k)];
        }
        let mut r_stat_b = [prob.c_border[0], prob.c_border[1]];
        let mut viol = 0.0f64;
        let mut gap = 0.0f64;
        for i in 0..m {
            let (ref gr, nt) = grads[i];
            for t in 0..nt {
                r_stat[gr[t].0] += gr[t].1 * lam[i];
            }
            if let Some((b, a)) = prob.ineqs[i].border {
                r_stat_b[b] += a * lam[i];
            }
            viol = viol.max(g[i]);
            gap += s[i] * lam[i];
        }
        let mu = gap / m as f64;

        let stat_inf = r_stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let eq_inf = r_eq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let statb_inf = (0..nb).fold(0.0f64, |a, b| a.max(r_stat_b[b].abs() / (1.0 + prob.c_border[b])));
        let scale = 1.0 + prob.c_inf;
        kkt_residual = (stat_inf / scale).max(statb_inf).max(eq_inf).max(viol).max(mu / scale);
        if trace {
            eprintln!(
                "ipm iter {iter:3}  mu {mu:9.3e}  viol {viol:9.3e}  eq {eq_inf:9.3e}  stat {stat_inf:9.3e}  statb {statb_inf:9.3e}  xi {:9.3e} {:9.3e}",
                xi[0], xi[1]
            );
        }
        let done = viol <= FEAS_TOL
            && eq_inf <= 1e-9 * (1.0 + prob.rhs_inf)
            && stat_inf <= spec.tolerance * scale
            && statb_inf <= spec.tolerance
            && mu <= 1e-9 * scale;
        if done {
            return IpmOut { w, xi, iterations: iter, kkt_residual, converged: true };
        }

        // Newton matrix: truth = H + sum lam_i P_i + G' W G + A (augmented).
        let mut truth = prob.h_band.clone();
        for &(row, col, a) in &prob.eq {
            truth.add(row, col, a);
        }
        let mut b_cols = vec![vec![0.0; dim]; nb];
        let mut s_diag = [[0.0f64; 2]; 2];
        for i in 0..m {
            let wi = lam[i] / s[i];
            let (ref gr, nt) = grads[i];
            for t in 0..nt {
                for u in t..nt {
                    let (ct, at) = gr[t];
                    let (cu, au) = gr[u];
                    // Both halves of symmetric off-band pairs collapse onto
                    // the same band slot via `add`.
                    if ct == cu && t != u {
                        truth.add(ct, cu, 2.0 * wi * at * au);
                    } else {
                        truth.add(ct, cu, wi * at * au);
                    }
                }
            }
            if let Some((qcol, qc)) = prob.ineqs[i].quad {
                truth.add(qcol, qcol, 2.0 * qc * lam[i]);
            }
            if let Some((b, ab)) = prob.ineqs[i].border {
                for t in 0..nt {
                    b_cols[b][gr[t].0] += wi * gr[t].1 * ab;
                }
                s_diag[b][b] += wi * ab * ab;
            }
        }
        let mut reg = truth.clone();
        for slot in 0..dim {
            reg.add(slot, slot, if is_primal(slot) { REG_P } else { -REG_D });
        }
        let bordered = match Bordered::new(reg, &truth, &b_cols, s_diag, nb) {
            Ok(b) => b,
            Err(_) => return IpmOut { w, xi, iterations: iter, kkt_residual, converged: false },
        };

        // rg_i = g_i + s_i stays fixed across predictor/corrector.
        let rg: Vec<f64> = (0..m).map(|i| g[i] + s[i]).collect();

        let solve_dir = |rc: &[f64]| -> (Vec<f64>, [f64; 2], Vec<f64>, Vec<f64>) {
            // rhs = -r_stat - sum_i grad_i W_i (rg_i - rc_i / lam_i); eq rows -r_eq.
            let mut rhs = vec![0.0; dim];
            let mut rhs_xi = [0.0f64; 2];
            for i in 0..dim {
                rhs[i] = -r_stat[i] - r_eq[i];
            }
            for b in 0..nb {
                rhs_xi[b] = -r_stat_b[b];
            }
            for i in 0..m {
                let wi = lam[i] / s[i];
                let term = wi * (rg[i] - rc[i] / lam[i]);
                let (ref gr, nt) = grads[i];
                for t in 0..nt {
                    rhs[gr[t].0] -= gr[t].1 * term;
                }
                if let Some((b, ab)) = prob.ineqs[i].border {
                    rhs_xi[b] -= ab * term;
                }
            }
            let (dz, dxi) = bordered.solve_refined(&rhs, &rhs_xi);
            let mut dlam = vec![0.0; m];
            let mut ds = vec![0.0; m];
            for i in 0..m {
                let (ref gr, nt) = grads[i];
                let mut gdz = 0.0;
                for t in 0..nt {
                    gdz += gr[t].1 * dz[gr[t].0];
                }
                if let Some((b, ab)) = prob.ineqs[i].border {
                    gdz += ab * dxi[b];
                }
                dlam[i] = (lam[i] / s[i]) * (gdz + rg[i]) - rc[i] / s[i];
                ds[i] = -rg[i] - gdz;
            }
            (dz, dxi, ds, dlam)
        };

        // Predictor (affine): rc = s lam.
        let rc_aff: Vec<f64> = (0..m).map(|i| s[i] * lam[i]).collect();
        let (_dz_a, dxi_a, ds_a, dlam_a) = solve_dir(&rc_aff);
        let mut alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dlam_a));
        for b in 0..nb {
            if dxi_a[b] < 0.0 {
                alpha_aff = alpha_aff.min(-xi[b] / dxi_a[b]);
            }
        }
        let mut gap_aff = 0.0;
        for i in 0..m {
            gap_aff += (s[i] + alpha_aff * ds_a[i]) * (lam[i] + alpha_aff * dlam_a[i]);
        }
        let mu_aff = (gap_aff / m as f64).max(0.0);
        // Floor the centering so mu cannot undershoot the termination target
        // by orders of magnitude: a collapsed barrier makes the scaling
        // matrix singular-grade and the iteration erratic.
        let sigma_floor = (0.05 * (1e-9 * scale) / mu).min(1.0);
        let sigma = (mu_aff / mu).powi(3).min(1.0).max(sigma_floor);

        // Corrector with a fallback: when the second-order term wrecks the
        // step (huge affine directions square into garbage), retry with pure
        // centering.
        let rc: Vec<f64> = (0..m)
            .map(|i| s[i] * lam[i] - sigma * mu + ds_a[i] * dlam_a[i])
            .collect();
        let (mut dz, mut dxi, mut ds, mut dlam) = solve_dir(&rc);
        let step_of = |s_: &[f64], ds_: &[f64], lam_: &[f64], dlam_: &[f64], dxi_: &[f64; 2]| {
            let mut ap = max_step(s_, ds_);
            for b in 0..nb {
                if dxi_[b] < 0.0 {
                    ap = ap.min(-xi[b] / dxi_[b]);
                }
            }
            (ap, max_step(lam_, dlam_))
        };
        let (mut ap, mut ad) = step_of(&s, &ds, &lam, &dlam, &dxi);
        if ap.min(ad) < 1e-3 && ap.min(ad) < 0.1 * alpha_aff {
            let rc_center: Vec<f64> = (0..m).map(|i| s[i] * lam[i] - sigma * mu).collect();
            let (z2, xi2, s2, l2) = solve_dir(&rc_center);
            let (ap2, ad2) = step_of(&s, &s2, &lam, &l2, &xi2);
            if ap2.min(ad2) > ap.min(ad) {
                dz = z2;
                dxi = xi2;
                ds = s2;
                dlam = l2;
                ap = ap2;
                ad = ad2;
            }
        }
        let alpha_p = (eta * ap).min(1.0);
        let alpha_d = (eta * ad).min(1.0);
        if trace {
            eprintln!(
                "        sigma {sigma:9.3e}  a_p {alpha_p:9.3e}  a_d {alpha_d:9.3e}  dxi {:9.3e} {:9.3e}  schur {:9.3e} {:9.3e}",
                dxi[0], dxi[1], bordered.schur[0][0], bordered.schur[1][1]
            );
        }
        if !alpha_p.is_finite() || !alpha_d.is_finite() || dz.iter().any(|v| !v.is_finite()) {
            return IpmOut { w, xi, iterations: iter, kkt_residual, converged: false };
        }

        for slot in 0..dim {
            let a = if is_primal(slot) { alpha_p } else { alpha_d };
            w[slot] += a * dz[slot];
        }
        for b in 0..nb {
            xi[b] += alpha_p * dxi[b];
        }
        for i in 0..m {
            s[i] += alpha_p * ds[i];
            lam[i] += alpha_d * dlam[i];
        }
    }
    IpmOut { w, xi, iterations: spec.max_iterations, kkt_residual, converged: false }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Initial-state checks for the constraints enforced from sample 1 onward;
/// a violating start has no feasible continuation.
fn precheck(spec: &OcpSpec) -> Result<(), SolveStatus> {
    let p = &spec.params;
    let a = p.braking();
    if spec.v0 < p.v_min - PRECHECK_TOL || spec.v0 > p.v_max + PRECHECK_TOL {
        return Err(SolveStatus::Infeasible);
    }
    if spec.entry_prevention
        && spec.v0 * spec.v0 + a * spec.dt * spec.v0 + 2.0 * a * spec.x0 > PRECHECK_TOL
    {
        return Err(SolveStatus::Infeasible);
    }
    if let Some(te) = spec.earliest_entry {
        if te > spec.t0 + 1e-9 && spec.x0 > PRECHECK_TOL {
            return Err(SolveStatus::Infeasible);
        }
    }
    if let Some(pl) = &spec.predecessor {
        let (px, pv) = pl.state_at(spec.t0);
        let head = px - p.length - p.margin;
        let kin = (spec.v0 * spec.v0 + a * spec.dt * spec.v0 - pv * pv) / (2.0 * a);
        if spec.x0 > head + PRECHECK_TOL || spec.x0 + kin.max(0.0) > head + PRECHECK_TOL {
            return Err(SolveStatus::Infeasible);
        }
    }
    if let Some(td) = spec.exit_by {
        if ((td - spec.t0) / spec.dt + 1e-9).floor() < 1.0 {
            return Err(SolveStatus::Infeasible);
        }
    }
    Ok(())
}

/// Solve the trajectory program to global optimality.
pub fn solve(spec: &OcpSpec) -> OcpSolution {
    assert!(spec.steps >= 1, "horizon must have at least one step");
    assert!(spec.dt > 0.0, "dt must be positive");
    if let Err(status) = precheck(spec) {
        return OcpSolution::failed(status);
    }
    let prob = build_problem(spec);
    let out = ipm(&prob, spec);
    if !out.converged {
        return OcpSolution {
            iterations: out.iterations,
            kkt_residual: out.kkt_residual,
            ..OcpSolution::failed(SolveStatus::IterLimit)
        };
    }
    if prob.nb == 2 && out.xi[1] > INFEASIBLE_XI {
        return OcpSolution {
            status: SolveStatus::Infeasible,
            trajectory: None,
            objective: f64::NEG_INFINITY,
            kkt_residual: out.kkt_residual,
            iterations: out.iterations,
            xi_safety: out.xi[0],
            xi_exit: out.xi[1],
        };
    }
    let u: Vec<f64> = (0..spec.steps).map(|k| out.w[iu(k)]).collect();
    let traj = integrate(spec.t0, spec.dt, spec.x0, spec.v0, &u);
    let objective = traj.objective(&spec.weights, spec.u_prev, spec.horizon());
    OcpSolution {
        status: SolveStatus::Optimal,
        trajectory: Some(traj),
        objective,
        kkt_residual: out.kkt_residual,
        iterations: out.iterations,
        xi_safety: out.xi[0],
        xi_exit: if prob.nb == 2 { out.xi[1] } else { 0.0 },
    }
}

/// Hold fallback: same state and horizon, entry prevention on, no entry/exit
/// requirements — the vehicle approaches but never crosses the stop line.
pub fn hold_trajectory(spec: &OcpSpec) -> OcpSolution {
    let mut held = spec.clone();
    held.entry_prevention = true;
    held.earliest_entry = None;
    held.require_exit_by_horizon = false;
    held.exit_by = None;
    let sol = solve(&held);
    if sol.status == SolveStatus::Optimal {
        return sol;
    }
    braking_fallback(&held).unwrap_or(sol)
}

/// Maximal-braking standstill: brake at the floor until stationary, then
/// stand. From any state satisfying the discrete envelope and rear-end
/// invariants this stays feasible (both forms are forward-invariant under
/// full braking), so it rescues hold solves that stall where a parked
/// optimum leaves the barrier no interior. Returns `None` if the checkers
/// reject the result — the caller then surfaces the stalled solve.
fn braking_fallback(spec: &OcpSpec) -> Option<OcpSolution> {
    use crate::safety::{check_bounds, envelope_margin, rear_end_ok, CHECK_TOL};
    let p = &spec.params;
    let mut v = spec.v0;
    let u: Vec<f64> = (0..spec.steps)
        .map(|_| {
            let u = if v > 0.0 { (-v / spec.dt).max(p.u_min) } else { 0.0 };
            v = (v + u * spec.dt).max(0.0);
            u
        })
        .collect();
    let traj = integrate(spec.t0, spec.dt, spec.x0, spec.v0, &u);
    let feasible = check_bounds(&traj, p, CHECK_TOL)
        && traj.x.iter().all(|&x| x <= CHECK_TOL)
        && envelope_margin(&traj, p.u_min) >= -CHECK_TOL
        && spec
            .predecessor
            .as_ref()
            .is_none_or(|pl| rear_end_ok(&traj, pl, p.length, p.margin, p.u_min, CHECK_TOL));
    if !feasible {
        return None;
    }
    let objective = traj.objective(&spec.weights, spec.u_prev, spec.horizon());
    Some(OcpSolution {
        status: SolveStatus::Fallback,
        trajectory: Some(traj),
        objective,
        kkt_residual: f64::INFINITY,
        iterations: 0,
        xi_safety: 0.0,
        xi_exit: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Fixed-sequence batch solve
// ---------------------------------------------------------------------------

/// One vehicle of a coordination batch.
#[derive(Clone, Debug)]
pub struct BatchVehicle {
    pub state: VehicleState,
    /// Exit line of the vehicle's lane, m.
    pub exit_pos: f64,
    /// Committed plan of the in-lane predecessor *outside* the batch, if any.
    pub pred_plan: Option<SampledTrajectory<f64>>,
}

/// Already-committed crossing window of a scheduled vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitContext {
    pub lane: LaneId,
    pub t_exit: f64,
}

/// Per-vehicle result of a fixed-order batch solve.
#[derive(Clone, Debug)]
pub struct SequencedSolve {
    pub vehicle: VehicleId,
    pub solution: OcpSolution,
    /// True when the exit requirement was infeasible and a hold was planned.
    pub held: bool,
    pub t_entry: Option<f64>,
    pub t_exit: Option<f64>,
}

/// Solve a batch in a fixed crossing order: each vehicle's earliest entry is
/// the latest exit among already-fixed conflicting vehicles (scheduled
/// context plus earlier batch members), and its rear-end constraint follows
/// the already-fixed plan of its lane predecessor. Vehicles that cannot exit
/// within the horizon are planned to hold instead (they then block no one:
/// a held vehicle never enters the conflict zone).
///
/// `order` must be a linear extension of the per-lane position chains.
pub fn solve_fixed_sequence(
    t0: f64,
    dt: f64,
    steps: usize,
    batch: &[BatchVehicle],
    order: &[usize],
    context: &[ExitContext],
    weights: &Weights,
    model: &IntersectionModel,
    tolerance: f64,
    max_iterations: usize,
) -> Vec<SequencedSolve> {
    assert_eq!(order.len(), batch.len(), "order must permute the batch");
    // Linear-extension contract: a vehicle's in-lane leaders come first.
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            assert!(
                batch[j].state.lane != batch[i].state.lane || batch[j].state.x < batch[i].state.x,
                "order must respect per-lane position chains"
            );
        }
    }
    let mut fixed_exits: Vec<ExitContext> = context.to_vec();
    let mut plans: Vec<Option<SampledTrajectory<f64>>> = vec![None; batch.len()];
    let mut results: Vec<Option<SequencedSolve>> = (0..batch.len()).map(|_| None).collect();
    for &idx in order {
        let veh = &batch[idx];
        let mut earliest = t0;
        for fe in &fixed_exits {
            if model.compatibility(veh.state.lane, fe.lane).unwrap_or(0) == 0 {
                earliest = earliest.max(fe.t_exit);
            }
        }
        // In-lane predecessor inside the batch (nearest ahead), else outside.
        let pred = batch
            .iter()
            .enumerate()
            .filter(|(j, b)| {
                *j != idx && b.state.lane == veh.state.lane && b.state.x > veh.state.x
            })
            .min_by(|a, b| a.1.state.x.partial_cmp(&b.1.state.x).unwrap())
            .map(|(j, _)| {
                plans[j]
                    .clone()
                    .expect("linear extension fixes in-lane leaders first")
            })
            .or_else(|| veh.pred_plan.clone());
        let spec = OcpSpec {
            t0,
            dt,
            steps,
            x0: veh.state.x,
            v0: veh.state.v,
            u_prev: veh.state.u_prev,
            weights: *weights,
            params: model.params,
            entry_prevention: false,
            earliest_entry: Some(earliest),
            exit_pos: veh.exit_pos,
            require_exit_by_horizon: true,
            exit_by: None,
            predecessor: pred,
            tolerance,
            max_iterations,
        };
        let mut held = false;
        let mut solution = solve(&spec);
        if solution.status != SolveStatus::Optimal {
            held = true;
            solution = hold_trajectory(&spec);
        }
        let (t_entry, t_exit) = match (&solution.trajectory, held) {
            (Some(tr), false) => (tr.crossing_time(0.0), tr.crossing_time(veh.exit_pos)),
            _ => (None, None),
        };
        if let Some(tx) = t_exit {
            fixed_exits.push(ExitContext { lane: veh.state.lane, t_exit: tx });
        }
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
