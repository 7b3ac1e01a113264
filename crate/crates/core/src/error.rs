use thiserror::Error;

use crate::descent::DescentTrajectory;

/// Which argument of a binary operation an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    First,
    Second,
}

impl std::fmt::Display for Operand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Operand::First => write!(f, "first"),
            Operand::Second => write!(f, "second"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{operand} operand has zero norm")]
    ZeroNorm { operand: Operand },

    #[error("internal consistency violated: {0}")]
    Inconsistency(String),

    #[error("power iteration did not converge after {iterations} iterations (estimate {estimate}, residual {residual:e})")]
    NoConvergence {
        estimate: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    Asymmetric { max_asymmetry: f64 },

    #[error("need at least {min} frames, got {frames}")]
    TooFewFrames { frames: usize, min: usize },

    #[error("frame {index} has zero norm")]
    DegenerateFrame { index: usize },

    #[error("frame {frame} collapsed to near-zero norm at step {step:?}")]
    DegenerateIterate {
        frame: usize,
        step: Option<usize>,
        partial: Option<Box<DescentTrajectory>>,
    },

    #[error("singular schedule at t={t}: 1 - alpha_bar = {one_minus_alpha_bar:e}")]
    SingularSchedule { t: usize, one_minus_alpha_bar: f64 },

    #[error("rank-deficient initialization after {attempts} attempts")]
    RankDeficient { attempts: usize },

    #[error("instance generator failed after {attempts} attempts: {reason}")]
    GeneratorFailure { attempts: usize, reason: String },

    #[error("function evaluation failed at coordinate {coordinate}: {source}")]
    Evaluation {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
