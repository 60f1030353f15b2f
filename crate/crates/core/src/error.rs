use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("beta = {beta} is outside the regime beta < 2*alpha + 2*p + 1 = {bound}")]
    OutOfRegime { beta: f64, bound: f64 },

    #[error("empty search bracket [{lo}, {hi}]")]
    EmptyBracket { lo: f64, hi: f64 },

    #[error(
        "residual is not monotone in tau: R({tau_lo:e}) = {r_lo:e} < R({tau_hi:e}) = {r_hi:e}"
    )]
    NonMonotoneResidual {
        tau_lo: f64,
        r_lo: f64,
        tau_hi: f64,
        r_hi: f64,
    },

    #[error("covariance is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },

    #[error("unsupported ensemble size J = {j} for dimension {dim}; exact initialisation needs J = {simplex} (simplex) or J = {pairs} (symmetric pairs)")]
    UnsupportedEnsembleSize {
        j: usize,
        dim: usize,
        simplex: usize,
        pairs: usize,
    },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("non-finite forward image for ensemble member {member}")]
    NonFiniteImage { member: usize },

    #[error("forward solve failed for ensemble member {member}: {source}")]
    ForwardFailed {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("prior precision is not positive definite for mu = {mu}")]
    PriorNotPositiveDefinite { mu: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn ensure_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
