//! Library side of the `muscall` command: dataset manifests, the synthetic
//! corpus generator and one function per subcommand.

pub mod commands;
pub mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

pub use commands::*;
pub use manifest::{load_manifest, load_splits, ManifestRow};
pub use synth::{generate_synthetic, AttributeSpace, Attributes, SyntheticCorpus, SyntheticSpec};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] muscall_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use muscall_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) | CliError::Io { .. } | CliError::Json(_) => exit::DATA,
            CliError::Core(e) => match e {
                E::Config(_) => exit::CONFIG,
                E::Data(_) | E::Io { .. } | E::IoBare(_) | E::AudioFormat { .. } | E::Format { .. } | E::Json(_) => {
                    exit::DATA
                }
                E::NonFinite { .. } | E::Diverged { .. } | E::NonDeterministic { .. } => exit::NUMERIC,
                _ => exit::OTHER,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
