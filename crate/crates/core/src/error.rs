use thiserror::Error;

/// Errors raised across the simulation, fitting and analysis pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failure at t = {time:.6} days: {reason}")]
    IntegrationFailure { time: f64, reason: String },

    #[error("trajectory has no positive peak")]
    NoPeak,

    #[error("run did not take off (final size {final_size} < {threshold})")]
    NoTakeoff { final_size: f64, threshold: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("sample too small: {n} < {min}")]
    SampleTooSmall { n: usize, min: usize },

    #[error("autocorrelation undefined for a constant series")]
    UndefinedAcf,

    #[error("relative error undefined for a zero true parameter")]
    UndefinedAre,

    #[error("covariance is singular; ellipse is degenerate")]
    DegenerateEllipse,

    #[error("rule not applicable: {0}")]
    RuleInapplicable(String),

    #[error("too many excluded trials: {excluded} of {total}")]
    TooManyExclusions { excluded: usize, total: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
