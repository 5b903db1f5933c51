use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, arity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or an infinity.
    #[error("numeric failure in `{primitive}`: {detail}")]
    Numeric { primitive: String, detail: String },

    /// A configuration could not be honoured.
    #[error("configuration error: {0}")]
    Config(String),

    /// An evaluation metric could not be computed from its inputs.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training left the admissible parameter region. `trace` holds the
    /// per-iteration objective recorded up to the abort.
    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence {
        iteration: usize,
        detail: String,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(primitive: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            primitive: primitive.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for numeric failures and divergences.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Divergence { .. })
    }
}

/// Returns a contract error when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
