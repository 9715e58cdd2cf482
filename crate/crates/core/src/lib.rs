//! Certified worst-case output deviation bounds for uncertain nonlinear
//! systems tracking a finite-horizon trajectory.
//!
//! The pipeline linearizes a nonlinear model along its nominal trajectory,
//! wraps the modelling error in integral quadratic constraints, and bounds
//! the worst-case output energy by sweeping a backward Riccati differential
//! equation. The multiplier weights are tuned by cutting-plane minimization
//! (ellipsoid method, or interval bisection for a single weight), with
//! infeasible weights turned into separating cuts via the finite escape time
//! of the Riccati sweep.

pub mod ellipsoid;
pub mod error;
pub mod lintime;
pub mod ode;
pub mod rde;
pub mod robot2link;
pub mod schedule;
pub mod schema;
pub mod traject;
pub mod worstcase;

pub use error::{Error, Result};
pub use schedule::{MatrixSchedule, TimeGrid};
