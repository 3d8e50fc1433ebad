use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed for blocks: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error("seed run {seed} failed: {message}")]
    Child { seed: u64, message: String },

    #[error(transparent)]
    Core(#[from] drdm_core::Error),

    #[error(transparent)]
    Bundle(#[from] drdm_core::error::BundleError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for problems the user can fix, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Io { .. } | CliError::Bundle(_) => 1,
            CliError::Core(drdm_core::Error::Invalid(_) | drdm_core::Error::MissingLevel(_)) => 1,
            CliError::Core(drdm_core::Error::Bundle(_)) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::GradCheck(_) => "gradcheck",
            CliError::Child { .. } => "child",
            CliError::Core(_) => "core",
            CliError::Bundle(_) => "bundle",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
        }
    }

    /// One-line JSON record for stderr.
    pub fn json_line(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Config(problems) = self {
            v["problems"] = serde_json::json!(problems);
        }
        v.to_string()
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
