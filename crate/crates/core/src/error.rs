use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::ToothLabel;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite coordinate in point cloud")]
    NonFinite,

    #[error("invalid FDI label {0}")]
    InvalidLabel(u32),

    #[error("invalid rigid motion: quaternion norm {0} is not 1")]
    InvalidMotion(f64),

    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),

    #[error("requested {requested} points from a cloud of {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("missing anchor tooth {0}")]
    MissingAnchor(ToothLabel),

    #[error("degenerate pair: barycenters {0:e} mm apart")]
    DegeneratePair(f64),

    #[error("no grid cell is covered by both clouds; the pair lies outside the grid extent")]
    NoOverlapSupport,

    #[error("infeasible arch spec: {0}")]
    InfeasibleSpec(String),

    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    Range {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
