//! Closed-loop dynamic pricing for price-responsive EV fleets.
//!
//! The crate is organised bottom-up:
//!
//! * [`domain`] holds the value types (grids, price and load vectors, charging
//!   sessions, bounds) plus scenario file I/O.
//! * [`agent`] solves each EV's charging problem and aggregates the fleet.
//! * [`sensitivity`] learns the price-to-load Jacobian online (Kalman filter)
//!   and offline (least squares warm start).
//! * [`controller`] evaluates the operator objective and computes projected
//!   price updates through a small in-house QP solver ([`qp`]).
//! * [`benchmark`] is the full-information bilevel benchmark.
//! * [`simkit`] generates fleets and tariffs, runs the day-by-day loop and
//!   produces reports and trace files.
//!
//! Numerical kernels are generic over [`Real`]; simulation and persistence are
//! fixed to `f64` through the aliases below.

pub mod agent;
pub mod benchmark;
pub mod controller;
pub mod domain;
pub mod linalg;
pub mod qp;
pub mod sensitivity;
pub mod simkit;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar accepted by the numerical kernels.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Scalar = f64;
pub type Prices = domain::PriceVector<Scalar>;
pub type Loads = domain::LoadProfile<Scalar>;
pub type Session = domain::EvSession<Scalar>;
pub type Fleet = domain::FleetScenario<Scalar>;
pub type PriceBounds = domain::Bounds<Scalar>;
pub type Mat = linalg::Matrix<Scalar>;
pub type Estimate = sensitivity::SensitivityEstimate<Scalar>;
pub type Config = controller::DsoConfig<Scalar>;

pub use agent::{fleet_jacobian, fleet_response, solve_ev_exact, solve_ev_penalty, AgentMode};
pub use benchmark::{reference_baseline, solve_benchmark, BenchmarkResult};
pub use controller::{dso_gradient, dso_objective, event_mask, lop_step, step_size};
pub use domain::{validate_scenario, Bounds, EvSession, FleetScenario, LoadProfile, PriceVector, TimeGrid};
pub use sensitivity::{kalman_update, warm_start, SensitivityEstimate};
