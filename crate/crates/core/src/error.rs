use thiserror::Error;

use crate::expr::ParseError;

/// Design step of the cascaded observer procedure; used to report which
/// precondition failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignStep {
    /// i) non-stable dimension
    NonStableDimension,
    /// ii) directional detectability
    Detectability,
    /// iii) gain choice / strong regularity
    GainChoice,
    /// iv) reconstruction map for the error system
    Reconstruction,
    /// v) derivative estimation
    Differentiation,
}

impl DesignStep {
    pub fn numeral(self) -> &'static str {
        match self {
            DesignStep::NonStableDimension => "i",
            DesignStep::Detectability => "ii",
            DesignStep::GainChoice => "iii",
            DesignStep::Reconstruction => "iv",
            DesignStep::Differentiation => "v",
        }
    }
}

impl std::fmt::Display for DesignStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}", self.numeral())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("non-finite value in entry ({row}, {col}) at t = {t}")]
    NonFiniteEntry { row: usize, col: usize, t: f64 },

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("singular value decomposition did not converge")]
    SvdNoConvergence,

    #[error("frame collapsed: column {column} has norm {norm:e} at t = {t}")]
    FrameCollapse { column: usize, norm: f64, t: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {name}: expected {expected}, found {found}")]
    DimensionMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("no constant-rank plateau of the observability matrices up to depth {nu_max}")]
    NoRankPlateau { nu_max: usize },

    #[error("rank of R_{depth} varies across probe times ({min} to {max}); not a constant rank system")]
    RankVaries { depth: usize, min: usize, max: usize },

    #[error("reconstruction matrix H is numerically singular at t = {t} (condition {condition:e})")]
    SingularReconstruction { t: f64, condition: f64 },

    #[error("{step} precondition failed: {reason}")]
    Precondition { step: DesignStep, reason: String },

    #[error("scenario error at `{path}`: {message}")]
    Scenario { path: String, message: String },
}

impl Error {
    pub fn precondition(step: DesignStep, reason: impl Into<String>) -> Self {
        Error::Precondition {
            step,
            reason: reason.into(),
        }
    }

    /// Coarse category used to derive CLI exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::Scenario { .. } => ErrorKind::Validation,
            Error::Precondition { .. } => ErrorKind::Precondition,
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Precondition,
    Numerical,
}
