use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("`{stage}` needs {}; run `{producer}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        producer: &'static str,
        path: PathBuf,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] telerisk::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "pipeline",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact { .. } => 3,
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<String>,
        }
        let path = match self {
            CliError::MissingArtifact { path, .. } | CliError::Io { path, .. } => {
                Some(path.display().to_string())
            }
            _ => None,
        };
        serde_json::to_string(&Record {
            error: self.kind(),
            message: self.to_string(),
            path,
        })
        .expect("record serializes")
    }
}
