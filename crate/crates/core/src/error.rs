use thiserror::Error;

use crate::histories::EventLabel;

/// Errors produced by model construction, propagation and history evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("impossible sector: {num_spins} spins with total S^z = {total_sz}")]
    ImpossibleSector { num_spins: usize, total_sz: f64 },

    #[error("basis has {basis} spins but the model needs {expected}")]
    BasisMismatch { basis: usize, expected: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operator is not Hermitian (max |A - A^H| = {0:e})")]
    NotHermitian(f64),

    #[error(
        "dimension {dim} exceeds the dense threshold {threshold}; use the Krylov propagator \
         or the typicality estimator instead"
    )]
    DenseThresholdExceeded { dim: usize, threshold: usize },

    #[error("energy window [{e_min}, {e_max}] contains no eigenvalues ({below} below, {above} above)")]
    EmptyWindow { e_min: f64, e_max: f64, below: usize, above: usize },

    #[error("projector family is not a complete orthogonal set: {0}")]
    IncompleteProjectors(String),

    #[error("unknown event label {0}")]
    UnknownLabel(EventLabel),

    #[error("history time step {spec} does not match propagator time step {propagator}")]
    TauMismatch { spec: f64, propagator: f64 },

    #[error("conditional probability undefined: denominator {denominator:e} is below floor {floor:e}")]
    UndefinedConditional { denominator: f64, floor: f64 },

    #[error("Krylov propagation did not converge after {substeps} sub-steps (error estimate {achieved:e})")]
    KrylovNonConvergence { substeps: usize, achieved: f64 },

    #[error("rate-equation fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },

    #[error("linear algebra failure: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
