use std::path::PathBuf;

use arrange_core::geometry::ToothLabel;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] arrange_core::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature of tooth {0} has zero norm")]
    DegenerateFeature(ToothLabel),
    #[error("cannot rearrange teeth across categories: {0}")]
    CannotRearrange(String),
    #[error("non-finite loss{}: {detail}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<usize>, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

impl ModelError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
