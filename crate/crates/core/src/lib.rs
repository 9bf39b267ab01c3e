//! Factor-graph 3D multi-object tracking.
//!
//! Detections are modeled as equally weighted Gaussian mixtures whose
//! max-mixture approximation turns data association into component selection
//! inside a nonlinear least-squares problem. The toolkit covers offline
//! (whole-sequence) and online (incremental) tracking, KITTI-format I/O,
//! CLEAR-MOT evaluation, and a synthetic scenario generator.

pub mod error;
pub mod factors;
pub mod graph;
pub mod kitti;
mod linalg;
pub mod metrics;
pub mod postprocess;
pub mod scalar;
pub mod simulate;
pub mod solver;
pub mod tracker;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete `f64` aliases for the main entry points.
pub type TrackerParams64 = types::TrackerParams<f64>;
pub type Detection64 = types::Detection<f64>;
pub type FactorGraph64 = graph::FactorGraph<f64>;
pub type SolverOptions64 = solver::SolverOptions<f64>;
