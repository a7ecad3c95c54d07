use plam_core::PlamError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Io { .. } => "io",
            CliError::Numerical(_) => "numerical",
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        let r = Record { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() };
        serde_json::to_string(&r).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

impl From<PlamError> for CliError {
    fn from(e: PlamError) -> Self {
        use PlamError::*;
        let msg = e.to_string();
        match e {
            InvalidConfig(_) | InvalidHyperparameter(_) | InvalidOrder(_) | InvalidBasisDimension { .. } => {
                CliError::Usage(msg)
            }
            Data(_) | DimensionMismatch(_) | ZeroMad | DegenerateSample(_) | OutOfRange { .. } | SingularDesign(_) => {
                CliError::Data(msg)
            }
            _ => CliError::Numerical(msg),
        }
    }
}
