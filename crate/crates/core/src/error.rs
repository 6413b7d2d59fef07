use thiserror::Error;

use crate::graph::EdgeId;

/// Errors produced by the geometry, graph, solver and analysis layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point behind camera (z = {z}, z_min = {z_min})")]
    BehindCamera { z: f64, z_min: f64 },

    #[error("invalid depth {0}")]
    InvalidDepth(f64),

    #[error("degenerate line: endpoints closer than {0} px")]
    DegenerateLine(f64),

    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("empty problem: selector {0} matches no edges")]
    EmptyProblem(String),

    #[error("gauge deficiency: unconstrained {}", .variables.join(", "))]
    GaugeDeficiency { variables: Vec<String> },

    #[error("singular landmark block for {0}")]
    SingularLandmark(String),

    #[error("underconstrained pose: {}", .directions.join("; "))]
    UnderconstrainedPose { directions: Vec<String> },

    #[error("certificate inapplicable: {0}")]
    CertificateInapplicable(String),

    #[error("edge {0} invalid: {1}")]
    InvalidEdge(EdgeId, String),

    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("alignment degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("insufficient associations: {found} pairs, need {needed}")]
    InsufficientAssociations { found: usize, needed: usize },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
