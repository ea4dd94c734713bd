use posediff_core::denoiser::DenoiserError;
use posediff_core::diffusion::DiffusionError;
use posediff_core::evalkit::EvalError;
use posediff_core::guidance::GuidanceError;
use posediff_core::io::IoError;
use posediff_core::scenegen::SceneError;
use thiserror::Error;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 4.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::InvalidSchedule(_) => CliError::Config(e.to_string()),
            DiffusionError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        match e {
            DenoiserError::Config(_) => CliError::Config(e.to_string()),
            DenoiserError::NonFinite { .. } | DenoiserError::Diverged { .. } => CliError::Numeric(e.to_string()),
            DenoiserError::Diffusion(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::Config(_) => CliError::Config(e.to_string()),
            GuidanceError::Diffusion(d) => d.into(),
            GuidanceError::Denoiser(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
