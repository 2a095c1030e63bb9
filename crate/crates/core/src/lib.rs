pub mod geometry;
pub mod kinematics;
pub mod manifold_codec;
pub mod mppi_planner;
pub mod qp_executor;
