//! Point and line-guidance local bundle adjustment with pose covariance
//! analysis.
//!
//! Lines enter the problem as `N` independent 3D guidance points sampled
//! along each observed segment; each guidance point contributes its signed
//! distance to the observed image line in every keyframe that sees the line.

pub mod error;
pub mod experiments;
pub mod geometry;
pub mod graph;
pub mod landmarks;
pub mod problem_file;
pub mod robust;
pub mod schur;
pub mod solver;
pub mod synthetic;
pub mod trajectory;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pose, Tangent};
pub use graph::{EdgeId, EdgeKind, FactorGraph, Selector};
pub use landmarks::{LineLandmark, LineObservation, NoiseModel, PointLandmark, PointObservation};
pub use robust::{Losses, RobustLoss};
pub use solver::{solve, SolveOptions, SolveReport};
