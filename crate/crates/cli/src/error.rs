use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Core(#[from] sdot_core::Error),
    #[error("{0} check(s) failed")]
    VerifyFailed(usize),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 2 for an unconverged solve, 3 for failed checks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(sdot_core::Error::NotConverged(_)) => 2,
            CliError::VerifyFailed(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
