use std::io;

use deepcut_core::evaluation::EvalError;
use deepcut_core::feature_io::FeatureIoError;
use deepcut_core::mask::MaskError;
use deepcut_core::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Features { path: String, source: FeatureIoError },
    #[error("{path}: {source}")]
    Mask { path: String, source: MaskError },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{id}: {source}")]
    Pipeline { id: String, source: PipelineError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
