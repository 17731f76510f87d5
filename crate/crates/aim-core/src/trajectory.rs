//! Sampled longitudinal trajectories under piecewise-constant acceleration.
//!
//! A trajectory stores `N` control samples `u[0..N]` on a uniform grid of
//! step `dt` starting at `t0`, plus the `N + 1` states obtained from the
//! exact step recursion
//!
//! ```text
//! v[k+1] = v[k] + u[k] dt
//! x[k+1] = x[k] + v[k] dt + u[k] dt^2 / 2
//! ```
//!
//! Because states are produced by [`integrate`] and nothing else, extracting
//! the control stream and re-integrating reproduces `x` and `v` bit for bit.
//! Continuous-time queries interpolate linearly in `x` (exact crossing times
//! for the quadratic arc are within one sample of the linear estimate; the
//! linear rule is the single convention used by every consumer). Queries past
//! the last sample extrapolate at constant terminal velocity and zero
//! acceleration.

use serde::{Deserialize, Serialize};

use crate::Real;

/// Running-cost weights: reward velocity, penalize acceleration and jerk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights<F> {
    /// Reward per unit velocity (`W_v`).
    pub velocity: F,
    /// Penalty per unit squared acceleration (`W_a`).
    pub accel: F,
    /// Penalty per unit squared jerk (`W_j`).
    pub jerk: F,
}

impl<F: Real> ObjectiveWeights<F> {
    pub fn new(velocity: F, accel: F, jerk: F) -> Self {
        Self { velocity, accel, jerk }
    }
}

/// Uniformly sampled trajectory; `x.len() == v.len() == u.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory<F> {
    pub t0: F,
    pub dt: F,
    pub x: Vec<F>,
    pub v: Vec<F>,
    pub u: Vec<F>,
}

/// Integrate piecewise-constant accelerations from `(x0, v0)`.
pub fn integrate<F: Real>(t0: F, dt: F, x0: F, v0: F, u: &[F]) -> SampledTrajectory<F> {
    assert!(dt > F::zero(), "dt must be positive");
    let half = F::of(0.5);
    let mut x = Vec::with_capacity(u.len() + 1);
    let mut v = Vec::with_capacity(u.len() + 1);
    x.push(x0);
    v.push(v0);
    let (mut xk, mut vk) = (x0, v0);
    for &uk in u {
        xk = xk + vk * dt + half * uk * dt * dt;
        vk = vk + uk * dt;
        x.push(xk);
        v.push(vk);
    }
    SampledTrajectory { t0, dt, x, v, u: u.to_vec() }
}

impl<F: Real> SampledTrajectory<F> {
    /// Number of control steps.
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    /// Time of the last sample.
    pub fn t_end(&self) -> F {
        self.t0 + self.dt * F::of(self.steps() as f64)
    }

    /// Grid index of time `t`, which must lie on the grid within `1e-6 dt`.
    ///
    /// The index may point past the last sample (extrapolated range).
    pub fn grid_index(&self, t: F) -> usize {
        let steps = ((t - self.t0) / self.dt).round();
        let k = steps.to_f64().unwrap();
        debug_assert!(
            ((t - self.t0) / self.dt - steps).abs() < F::of(1e-6),
            "time {t:?} is off the sample grid"
        );
        debug_assert!(k >= 0.0, "time {t:?} precedes trajectory start");
        k as usize
    }

    /// State `(x, v)` at grid index `k`, extrapolating at constant velocity
    /// past the end.
    pub fn state_at_index(&self, k: usize) -> (F, F) {
        let n = self.steps();
        if k <= n {
            (self.x[k], self.v[k])
        } else {
            let over = F::of((k - n) as f64) * self.dt;
            (self.x[n] + self.v[n] * over, self.v[n])
        }
    }

    /// State `(x, v)` at an on-grid time `t >= t0`.
    pub fn state_at(&self, t: F) -> (F, F) {
        self.state_at_index(self.grid_index(t))
    }

    /// Control applied over the step starting at grid index `k` (zero in the
    /// extrapolated range).
    pub fn control_at_index(&self, k: usize) -> F {
        if k < self.u.len() {
            self.u[k]
        } else {
            F::zero()
        }
    }

    /// First time the position reaches `pos`, linearly interpolated between
    /// the bracketing samples; `None` if the trajectory never reaches it
    /// (extrapolation is not consulted).
    pub fn crossing_time(&self, pos: F) -> Option<F> {
        if self.x[0] >= pos {
            return Some(self.t0);
        }
        for k in 1..self.x.len() {
            if self.x[k] >= pos {
                let span = self.x[k] - self.x[k - 1];
                let frac = if span > F::zero() { (pos - self.x[k - 1]) / span } else { F::zero() };
                return Some(self.t0 + self.dt * (F::of((k - 1) as f64) + frac));
            }
        }
        None
    }

    /// Running objective over `[t0, t0 + horizon]` by the left Riemann sum
    /// `sum_k (W_v v[k] - W_a u[k]^2 - W_j j[k]^2) dt`, where
    /// `j[k] = (u[k] - u[k-1]) / dt` and `j[0]` differences against `u_prev`.
    ///
    /// Samples past the stored range take the padded stream: constant
    /// terminal velocity, zero acceleration (so one jerk impulse closes the
    /// stored control stream if it ends on a nonzero value).
    pub fn objective(&self, weights: &ObjectiveWeights<F>, u_prev: F, horizon: F) -> F {
        let n_steps = ((horizon / self.dt).round()).to_f64().unwrap() as usize;
        debug_assert!(
            (horizon / self.dt - F::of(n_steps as f64)).abs() < F::of(1e-6),
            "horizon must be a whole number of steps"
        );
        let mut total = F::zero();
        let mut last_u = u_prev;
        for k in 0..n_steps {
            let (_, vk) = self.state_at_index(k);
            let uk = self.control_at_index(k);
            let jk = (uk - last_u) / self.dt;
            total = total + (weights.velocity * vk - weights.accel * uk * uk - weights.jerk * jk * jk) * self.dt;
            last_u = uk;
        }
        total
    }

    /// CSV dump with header `t,x,v,u` (empty `u` on the terminal sample).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,v,u\n");
        for k in 0..self.x.len() {
            let t = self.t0 + self.dt * F::of(k as f64);
            let u = if k < self.u.len() {
                format!("{:?}", self.u[k].to_f64().unwrap())
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{:?},{:?},{:?},{}\n",
                t.to_f64().unwrap(),
                self.x[k].to_f64().unwrap(),
                self.v[k].to_f64().unwrap(),
                u
            ));
        }
        out
    }
}
