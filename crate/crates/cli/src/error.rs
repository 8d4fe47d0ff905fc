use ofo_core::benchmark::BenchmarkError;
use ofo_core::controller::ControllerError;
use ofo_core::domain::io::IoError;
use ofo_core::domain::DomainError;
use ofo_core::sensitivity::SensitivityError;
use ofo_core::simkit::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

const USER: u8 = 2;
const INTERNAL: u8 = 1;

fn controller_code(e: &ControllerError) -> u8 {
    match e {
        ControllerError::Config(_) | ControllerError::Domain(_) | ControllerError::Dimension(_) => USER,
        _ => INTERNAL,
    }
}

fn sensitivity_code(e: &SensitivityError) -> u8 {
    match e {
        SensitivityError::InsufficientData(_) | SensitivityError::Dimension(_) | SensitivityError::FullModeTooLarge(_) => USER,
        _ => INTERNAL,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Domain(_) => USER,
            CliError::Sim(e) => match e {
                SimError::Domain(_)
                | SimError::Io(_)
                | SimError::InfeasibleAfterShift { .. }
                | SimError::WindowTooLong { .. }
                | SimError::InvalidArgument(_) => USER,
                SimError::Sensitivity(s) => sensitivity_code(s),
                SimError::Controller(c) => controller_code(c),
                SimError::Fleet(_) => INTERNAL,
            },
            CliError::Sensitivity(e) => sensitivity_code(e),
            CliError::Benchmark(e) => match e {
                BenchmarkError::InvalidArgument(_) | BenchmarkError::Domain(_) => USER,
                BenchmarkError::Controller(c) => controller_code(c),
                BenchmarkError::Fleet(_) => INTERNAL,
            },
            CliError::Controller(e) => controller_code(e),
        }
    }
}
