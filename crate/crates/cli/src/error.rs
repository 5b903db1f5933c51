use std::fmt;

/// Exit status for a successful invocation.
pub const EXIT_OK: i32 = 0;
/// Exit status for failures that are neither configuration nor numeric.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for invalid or unreadable configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numeric failures and divergence.
pub const EXIT_NUMERIC: i32 = 3;

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: bnn_core::Error,
}

impl StageError {
    pub fn new(stage: &'static str, source: impl Into<bnn_core::Error>) -> Self {
        StageError {
            stage,
            source: source.into(),
        }
    }

    pub fn config(stage: &'static str, msg: impl Into<String>) -> Self {
        StageError::new(stage, bnn_core::Error::Config(msg.into()))
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use bnn_core::Error;
        match &self.source {
            e if e.is_numeric() => EXIT_NUMERIC,
            Error::Config(_) | Error::Contract(_) | Error::Json(_) => EXIT_CONFIG,
            Error::Io(_) | Error::Csv(_) if matches!(self.stage, "config" | "data") => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Attaches a stage name to core results.
pub trait AtStage<T> {
    fn at(self, stage: &'static str) -> StageResult<T>;
}

impl<T, E: Into<bnn_core::Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|e| StageError::new(stage, e))
    }
}
