//! Parameter and state estimation for partially observed linear ODE systems
//! by minimization of an optimal-control smoothing criterion, with a
//! nonlinear-least-squares baseline, a discretized brute-force oracle and a
//! Monte-Carlo benchmark harness.

pub mod dkf;
pub mod error;
pub mod estimators;
pub mod gradient;
pub mod grid;
pub mod harness;
pub mod model;
pub mod ode;
pub mod optimize;
pub mod oracle;
pub mod rng;
pub mod signal;
pub mod spline;

pub use error::{Error, Result};
