//! Learn better optimization parameters from plans people already trust.
//!
//! Given a linear program and an observed solution, the [`inverse`] module
//! recovers constraint parameters under which that solution is optimal, then
//! pushes a chosen bound further in a preferred direction while staying close
//! to the observation. The [`rtp`] module builds the radiotherapy fluence-map
//! model this machinery was designed for: voxel doses, dose-volume (CVaR)
//! constraints, and per-structure penalties over a dose-influence matrix.
//! [`improve`] ties the two together into an iterative plan-improvement loop,
//! [`phantom`] generates small synthetic patient geometries to run it on, and
//! [`analysis`] provides DVH curves and Pareto sweeps for inspecting results.
//!
//! Everything reduces to plain linear programs solved by the dense simplex
//! backend in [`lp`], which also provides feasibility checks, duality
//! certificates, and exhaustive vertex enumeration for small programs.

pub mod analysis;
pub mod improve;
pub mod inverse;
pub mod lp;
pub mod phantom;
pub mod rtp;
pub mod tol;
