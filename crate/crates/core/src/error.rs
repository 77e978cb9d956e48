//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degree {degree} not valid for {op}")]
    Degree { op: &'static str, degree: usize },

    #[error("evaluation produced a non-finite value near {context}")]
    NonFinite { context: String },

    #[error("gradient check failed: analytic and finite-difference gradients disagree at coordinate {coordinate} (analytic {analytic:.6e}, fd {finite_difference:.6e})")]
    GradientMismatch {
        coordinate: usize,
        analytic: f64,
        finite_difference: f64,
    },

    #[error("unsupported derivative order {order} (maximum {max})")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("grid too coarse: {points} points per axis cannot resolve order {order} stencils")]
    GridTooCoarse { points: usize, order: usize },

    #[error("time step {dt:.6e} violates the stability bound; use dt <= {suggested:.6e}")]
    CflViolation { dt: f64, suggested: f64 },

    #[error("diffusion matrix must be symmetric positive definite: {reason}")]
    IndefiniteDiffusion { reason: String },

    #[error("invalid model parameters: {reason}")]
    InvalidModel { reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation failed at segment {segment}: {reason}")]
    Segment { segment: usize, reason: String },

    #[error("evaluation failed at node {node}: {reason}")]
    Node { node: usize, reason: String },

    #[error(
        "linear solve did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    SolveDiverged { residual: f64, iterations: usize },

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
