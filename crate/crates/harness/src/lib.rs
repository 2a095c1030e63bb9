//! Scenarios, closed-loop simulation and experiment suites for manifold-constrained MPPI.

pub mod decoders;
pub mod episode;
pub mod experiment;
pub mod plots;
pub mod scenario;
