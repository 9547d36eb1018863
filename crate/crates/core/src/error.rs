use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph needs at least 2 nodes, got {0}")]
    EmptyGraph(usize),

    #[error("degenerate radius sum {sum} for pair ({i}, {j})")]
    DegenerateRadius { i: usize, j: usize, sum: f64 },

    /// Beliefs, adjacencies or configurations that are not keyed by the
    /// candidate pairs of the graph they are used with.
    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} has size {got}, limit is {max}")]
    Size { what: &'static str, got: usize, max: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid data in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyGraph(_) => "empty_graph",
            Error::DegenerateRadius { .. } => "degenerate_radius",
            Error::Structural(_) => "structural",
            Error::Domain(_) => "domain",
            Error::Size { .. } => "size",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Data { .. } => "data",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

/// Read a configuration file: JSON when the name ends in `.json`, TOML
/// otherwise.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let data_err = |reason: String| Error::Data { path: path.to_path_buf(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| data_err(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| data_err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| data_err(e.to_string()))
    }
}
