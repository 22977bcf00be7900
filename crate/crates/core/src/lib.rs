//! Detection of abnormal driving-mode switches in hybrid traffic.
//!
//! The pipeline: a seeded microscopic traffic simulator ([`sim`]) produces
//! labeled trajectories; connected vehicles observe and share them with
//! occlusion and measurement noise ([`sensing`]); a trajectory predictor
//! ([`predict`]) turns fused observations into per-step bivariate-Gaussian
//! forecasts; and sequential change-detection statistics ([`qcd`]) monitor
//! the resulting prediction-error stream for a mode switch. [`harness`]
//! wires the stages into reproducible end-to-end experiments.

pub mod harness;
pub mod io;
pub mod predict;
pub mod qcd;
pub mod sensing;
pub mod sim;
pub mod types;
