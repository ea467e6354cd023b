use std::path::PathBuf;

/// Errors raised anywhere in the pipeline. Each variant names the
/// subsystem it originates from so CLI diagnostics stay module-qualified.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data_io: format error: {0}")]
    Format(String),

    #[error("data_io: corruption: {0}")]
    Corruption(String),

    #[error("data_io: insufficient data: {0}")]
    InsufficientData(String),

    #[error("data_io: incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("dsp: unsupported: {0}")]
    Unsupported(String),

    #[error("dsp: filter design: {0}")]
    Design(String),

    #[error("engine: shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("engine: {0}")]
    Graph(String),

    #[error("numerical: non-finite value in {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("contamination: alignment: {0}")]
    Alignment(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("training: {0}")]
    Training(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
