use std::path::Path;

use thiserror::Error;

use crate::anomaly::AnomalyError;
use crate::config::ConfigError;
use crate::explain::ExplainError;
use crate::granger::GrangerError;
use crate::graph::GraphError;
use crate::ingest::IngestError;
use crate::metrics::MetricsError;
use crate::synth::SynthError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_REMOTE: i32 = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("anomaly: {0}")]
    Anomaly(#[from] AnomalyError),
    #[error("granger: {0}")]
    Granger(#[from] GrangerError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("explain: {0}")]
    Explain(#[from] ExplainError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {path}: {message}")]
    Json { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn json(path: &Path, err: serde_json::Error) -> Self {
        Error::Json { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Synth(_) | Error::Usage(_) => EXIT_CONFIG,
            Error::Explain(ExplainError::RemoteUnavailable(_) | ExplainError::MalformedResponse(_)) => EXIT_REMOTE,
            _ => EXIT_DATA,
        }
    }
}
