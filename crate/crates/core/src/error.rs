use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("calibration failed after {iterations} iterations: target ctr {target_ctr}, cvr {target_cvr}; achieved ctr {achieved_ctr}, cvr {achieved_cvr}")]
    Calibration { iterations: usize, target_ctr: f64, target_cvr: f64, achieved_ctr: f64, achieved_cvr: f64 },

    #[error("feature id {id} out of vocabulary for field `{field}` (size {size})")]
    OutOfVocabulary { field: &'static str, id: u32, size: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize, trace: Vec<crate::estimators::EpochLoss> },

    #[error("ground truth required: {0}")]
    MissingGroundTruth(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension { context: context.into(), detail: detail.into() }
    }
}
