//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, identification, and estimation routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("non-finite value in input: {0}")]
    NonFinite(f64),

    #[error("quantile level {0} outside (0, 1)")]
    TauOutOfRange(f64),

    #[error("quantile level {tau} maps outside the support window")]
    TauOutsideWindow { tau: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate support: lower {lower} >= upper {upper}")]
    DegenerateSupport { lower: f64, upper: f64 },

    #[error("treatment mismatch composing maps: {a_target} -> {b_source}")]
    TreatmentMismatch { a_target: usize, b_source: usize },

    #[error("map image escapes the target grid span at y = {0}")]
    RangeEscape(f64),

    #[error("map images are not strictly increasing near index {0}")]
    NotStrictlyIncreasing(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("unknown preset: {0}")]
    UnknownPreset(String),

    #[error("dataset has no latent records")]
    NoLatentData,

    #[error("no observations in cell (t = {t}, z = {z})")]
    EmptyCell { t: usize, z: usize },

    #[error("weak instrument pair ({z}, {z_prime}) at t = {t}: |p difference| = {delta:.6} <= {eta}")]
    WeakPair {
        z: usize,
        z_prime: usize,
        t: usize,
        delta: f64,
        eta: f64,
    },

    #[error("pair has sign treatment {found:?} but {required} is needed")]
    SignTreatmentMismatch {
        found: Option<usize>,
        required: usize,
    },

    #[error("no pair in the monotonicity subset has sign treatment {t} or {t_prime}")]
    NoEligiblePair { t: usize, t_prime: usize },

    #[error("the different-monotonicity-types condition fails: {0}")]
    AssumptionViolated(String),

    #[error("no grid solution below tolerance: best residual {best_residual:.3e} at {candidate:?}")]
    NoSolutionOnGrid {
        best_residual: f64,
        candidate: Vec<f64>,
    },

    #[error("nested map domain is empty at y_f = {0}")]
    DomainEmpty(f64),

    #[error("crossing search saturated at the grid boundary (y_f = {0})")]
    Saturated(f64),

    #[error("monotone bracketing violated at grid index {index}: residual decreased")]
    NonMonotoneBracketing { index: usize },

    #[error("Jacobian input is not square: {rows} instrument values vs {cols} treatments")]
    NotSquare { rows: usize, cols: usize },

    #[error("need at least two samples for density estimation, got {0}")]
    TooFewSamples(usize),

    #[error("candidate grid too large: {candidates} exceeds cap {cap}")]
    GridTooLarge { candidates: u128, cap: u128 },

    #[error("io error: {0}")]
    Io(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    /// 2 = configuration error, 3 = identification-assumption failure, 4 = data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_)
            | Error::UnknownPreset(_)
            | Error::TauOutOfRange(_)
            | Error::GridTooLarge { .. } => 2,
            Error::AssumptionViolated(_)
            | Error::WeakPair { .. }
            | Error::NoEligiblePair { .. }
            | Error::SignTreatmentMismatch { .. }
            | Error::NoSolutionOnGrid { .. } => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
