use thiserror::Error;

/// Errors raised by the assimilation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("operation needs at least {need} ensemble members, got {got}")]
    TooFewMembers { need: usize, got: usize },

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("{context}: dimension mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(&'static str),

    #[error("{context}: matrix is not symmetric positive definite ({detail})")]
    NotPositiveDefinite {
        context: &'static str,
        detail: String,
    },

    #[error("{context}: singular linear system; {hint}")]
    SingularSystem {
        context: &'static str,
        hint: &'static str,
    },

    #[error("constraint Jacobian is rank deficient ({context})")]
    RankDeficient { context: &'static str },

    #[error("projection failed to reach tolerance after {iterations} iterations (residual {residual:.3e})")]
    ProjectionFailed { iterations: usize, residual: f64 },

    #[error("{context}: Newton iteration did not converge (residual {residual:.3e}); {hint}")]
    NewtonFailed {
        context: &'static str,
        residual: f64,
        hint: &'static str,
    },

    #[error("non-finite value in {context} (member {member})")]
    NonFinite { context: &'static str, member: usize },

    #[error("member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{scheme} step failed for member {member}: {source}")]
    Scheme {
        scheme: &'static str,
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn member(member: usize, source: Error) -> Self {
        Error::Member {
            member,
            source: Box::new(source),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyEnsemble => "empty_ensemble",
            Error::TooFewMembers { .. } => "too_few_members",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateEnsemble(_) => "degenerate_ensemble",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::SingularSystem { .. } => "singular_system",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::ProjectionFailed { .. } => "projection_failed",
            Error::NewtonFailed { .. } => "newton_failed",
            Error::NonFinite { .. } => "non_finite",
            Error::Member { source, .. } => source.kind(),
            Error::Scheme { source, .. } => source.kind(),
            Error::Unsupported(_) => "unsupported",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Serialization(_) => "serialization",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
