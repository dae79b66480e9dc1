use std::path::PathBuf;

use crate::model::ModuleId;

pub type Result<T, E = TailorError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum TailorError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("module {0} is not valid for this model")]
    InvalidModule(ModuleId),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("non-finite gradient in group {group} at element {index}")]
    NonFinite { group: usize, index: usize },

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("corrupt container {}: {reason}", path.display())]
    CorruptContainer { path: PathBuf, reason: String },

    #[error("recipe error at `{field}`: {message}")]
    Recipe { field: String, message: String },

    #[error("checkpoint {} does not contain module {module}", path.display())]
    SourceLacksModule { module: ModuleId, path: PathBuf },

    #[error("no checkpoint at or before the failure step contains: {}", join_modules(.0))]
    UnrecoverableModule(Vec<ModuleId>),

    #[error("checkpoint is incomplete, missing: {} (merge partial checkpoints first)", join_modules(.0))]
    MissingModules(Vec<ModuleId>),

    #[error("invalid configuration: {0}")]
    Config(String),
}

fn join_modules(modules: &[ModuleId]) -> String {
    modules
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

impl TailorError {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TailorError::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TailorError::CorruptContainer {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn recipe(field: impl Into<String>, message: impl Into<String>) -> Self {
        TailorError::Recipe {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the tool itself rather than of its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            TailorError::Consistency(_) | TailorError::Storage { .. }
        )
    }
}
