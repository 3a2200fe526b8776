use fst_core::config::ConfigError;
use fst_core::container::ContainerError;
use fst_core::forecast::ForecastError;
use fst_core::persist::PersistError;
use fst_core::spectral::SpectralError;
use fst_core::trajectory::SolverError;
use fst_core::training::TrainError;
use fst_core::transformer::ModelError;
use thiserror::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_BLOWUP: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;

/// Failure classes, one process exit code each.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Blowup(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Blowup(_) => EXIT_BLOWUP,
            CliError::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        CliError::Mismatch(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Blowup { .. } => CliError::Blowup(e.to_string()),
            SolverError::InvalidArgument(_) => CliError::Config(e.to_string()),
            SolverError::Spectral(s) => s.into(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::Blowup(e.to_string()),
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Solver(s) => s.into(),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => CliError::Blowup(e.to_string()),
            TrainError::InsufficientSamples { .. } | TrainError::Invalid(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Solver(s) => s.into(),
            TrainError::Tensor(_) => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Misaligned(_) => CliError::Mismatch(e.to_string()),
            ForecastError::Invalid(_) => CliError::Config(e.to_string()),
            ForecastError::Model(m) => m.into(),
            ForecastError::Spectral(s) => s.into(),
            ForecastError::Solver(s) => s.into(),
        }
    }
}
