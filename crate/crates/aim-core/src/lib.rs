//! Simulator and coordination library for un-signalized autonomous
//! intersection management.
//!
//! Connected automated vehicles approach a multi-lane intersection, receive a
//! provisional trajectory on admission, and are then scheduled through the
//! conflict zone by a central coordinator. Three coordination strategies are
//! implemented on top of one convex trajectory optimizer:
//!
//! * a demand-driven sequential scheduler that picks the next vehicle by a
//!   weighted precedence index and re-weights its objective by batch demand,
//! * an exhaustive combined optimizer that enumerates every admissible
//!   crossing order (linear extensions of the per-lane queues) and keeps the
//!   best total objective, and
//! * a first-in-first-out baseline.
//!
//! A fixed-time signalized baseline (Webster cycle timing over a conflict-free
//! lane partition) and a Poisson arrival process with a safe-admission gate
//! complete the simulation loop in [`engine`]. [`harness`] reproduces the
//! comparative metrics (time to cross, per-vehicle objective, batch sizes,
//! computation time, realized arrival rates) over seeded trial grids.
//!
//! Pure numeric foundations ([`trajectory`], [`safety`], [`banded`],
//! [`harness::box_stats`]) are generic over the scalar type via [`Real`];
//! everything downstream uses the crate-level [`Scalar`] alias (f64).

pub mod arrivals;
pub mod banded;
pub mod config;
pub mod coordination;
pub mod engine;
pub mod harness;
pub mod model;
pub mod ocp;
pub mod safety;
pub mod signalized;
pub mod trajectory;

/// Scalar used by the simulation stack.
pub type Scalar = f64;

/// Floating-point scalar bound for the generic numeric foundations.
///
/// Implemented by `f32` and `f64`; `from_f64` converts constants without
/// panicking on the types we support.
pub trait Real: num_traits::Float + num_traits::FromPrimitive + std::fmt::Debug + 'static {
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub use model::{IntersectionModel, LaneGeometry, PhysicalParams, VehicleState};
pub use ocp::{OcpSolution, OcpSpec, SolveStatus};
pub use trajectory::SampledTrajectory;

/// Sampled trajectory over the crate scalar.
pub type Trajectory = SampledTrajectory<Scalar>;
