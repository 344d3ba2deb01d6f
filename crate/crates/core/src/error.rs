use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("no energy entry for frame id(s) {0:?}")]
    MissingFrame(Vec<u64>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid cutoff {cutoff}: must be positive and at most half the smallest box edge ({half_box})")]
    InvalidCutoff { cutoff: f64, half_box: f64 },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("training diverged at epoch {epoch}: non-finite {term} loss (last good checkpoint: {last_checkpoint:?})")]
    Divergence {
        term: String,
        epoch: usize,
        last_checkpoint: Option<std::path::PathBuf>,
    },

    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: String },

    #[error("latent refinement diverged at step {step}")]
    RefinementDivergence { step: usize },

    #[error("R² undefined: reference values have zero variance")]
    UndefinedR2,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that come from the numerics rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::NonFiniteLoss { .. }
                | Error::RefinementDivergence { .. }
                | Error::UndefinedR2
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
