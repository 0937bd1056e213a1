//! Finite-horizon covariance steering for linear systems whose matrices depend
//! on constant random parameters.

pub mod config;
pub mod linearize;
pub mod montecarlo;
pub mod moments;
pub mod problem;
pub mod scenarios;
pub mod scp;
pub mod subproblem;
pub mod system;
