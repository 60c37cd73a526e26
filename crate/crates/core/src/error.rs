use thiserror::Error;

#[derive(Debug, Error)]
pub enum FicoError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing loss component `{component}` for mode {mode}")]
    MissingComponent {
        component: &'static str,
        mode: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl FicoError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FicoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FicoError::InvalidArgument(_)
                | FicoError::Dataset(_)
                | FicoError::Shape(_)
                | FicoError::MissingComponent { .. }
                | FicoError::Json(_)
        ) || matches!(self, FicoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T> = std::result::Result<T, FicoError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::FicoError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
