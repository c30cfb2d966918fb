use thiserror::Error;

pub type Result<T> = std::result::Result<T, SowError>;

#[derive(Debug, Error)]
pub enum SowError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// 1 - alpha_bar is too close to zero to divide by.
    #[error("near-data-end singularity at timestep {t} (1 - alpha_bar = {one_minus_alpha_bar:e})")]
    NearDataSingularity { t: usize, one_minus_alpha_bar: f64 },

    #[error("invalid timestep {t}: {reason}")]
    InvalidTimestep { t: usize, reason: String },

    #[error("numerical divergence at step {step}: {detail}")]
    NumericalDivergence { step: usize, detail: String },

    #[error("condition of {got:?} does not fit box of {want:?}; resize required")]
    ResizeRequired {
        got: (usize, usize),
        want: (usize, usize),
    },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SowError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SowError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SowError::InvalidArgument(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SowError::ContractViolation(msg.into())
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        SowError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
