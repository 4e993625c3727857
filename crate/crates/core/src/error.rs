//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by measure construction and transport operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure must contain at least one atom")]
    Empty,
    #[error("atom {index} has {got} coordinates, expected {expected}")]
    AtomDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("weights must be non-negative, atom {index} has weight {weight}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("weights sum to {sum}, expected 1 within {tol}")]
    WeightSum { sum: f64, tol: f64 },
    #[error("non-finite coordinate or weight at atom {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("transport order p = {p} must be >= 1")]
    InvalidOrder { p: f64 },
    #[error("exact-assignment transport requires equal atom counts and uniform weights ({detail})")]
    AssignmentPrecondition { detail: String },
    #[error("sorted-1d transport requires dim = 1, got {dim}")]
    QuantilePrecondition { dim: usize },
    #[error("no exact transport mode applies: dim {dim}, {left} vs {right} atoms, uniform: {uniform}")]
    UnsupportedTransport {
        dim: usize,
        left: usize,
        right: usize,
        uniform: bool,
    },
    #[error("time grids differ ({detail})")]
    GridMismatch { detail: String },
    #[error("grid must start at 0 and be strictly increasing")]
    InvalidGrid,
    #[error("state/control split {state_dim} exceeds measure dim {dim}")]
    InvalidSplit { state_dim: usize, dim: usize },
    #[error("particle state and control counts differ: {states} vs {controls}")]
    CountMismatch { states: usize, controls: usize },
    #[error("mixture step {step} weights sum to {sum}, expected 1")]
    MixtureWeightSum { step: usize, sum: f64 },
    #[error("noise increment count {got} does not match grid step count {expected}")]
    IncrementCount { got: usize, expected: usize },
    #[error("failed to parse measure record: {0}")]
    Parse(String),
}
