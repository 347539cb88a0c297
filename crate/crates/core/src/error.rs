//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("truncation cap exceeded: {required} levels needed, cap is {cap}")]
    TruncationCap { required: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty spectrum")]
    EmptySpectrum,

    #[error("no peak qualifies as a zero-phonon-line candidate")]
    NoZplCandidate,

    #[error("no force candidate falls inside the prior interval [{lo}, {hi}]")]
    EmptyPriorIntersection { lo: f64, hi: f64 },

    #[error("residual tie: candidates l={best_l} and l={second_l} agree within 1% ({best:.3e} vs {second:.3e}); measurement does not resolve the branch")]
    ResidualTie {
        best_l: i64,
        second_l: i64,
        best: f64,
        second: f64,
    },

    #[error("objective is flat at the chosen reference point; height carries no force information there")]
    FlatObjective,

    #[error("bath discretization refused: {0}")]
    OracleRefusal(String),

    #[error("integrator norm drift {drift:.3e} exceeds 1e-6; discretization or step size is inadequate")]
    NormDrift { drift: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("spectrum file error: {0}")]
    SpectrumFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
