use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum JomiError {
    #[error("empty score pool")]
    EmptyScorePool,

    #[error("score family mismatch: {family} requires field `{field}`")]
    ScoreFamilyMismatch {
        family: &'static str,
        field: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid partition: breakpoints must be finite, sorted and distinct")]
    InvalidPartition,

    #[error("top-K undefined under ties")]
    TopKTies,

    #[error("beta too small for calibration size (K = {k} > n = {n})")]
    BetaTooSmall { k: usize, n: usize },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("selection rule failed on swap (i = {i}, j = {j}): {source}")]
    RuleEvaluation {
        i: usize,
        j: usize,
        #[source]
        source: Box<JomiError>,
    },

    #[error("missing outcome for calibration unit {0}")]
    MissingOutcome(usize),

    #[error("undefined miscoverage: no unit was ever selected")]
    UndefinedMiscoverage,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = JomiError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> JomiError {
    JomiError::InvalidParameter(msg.into())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}
