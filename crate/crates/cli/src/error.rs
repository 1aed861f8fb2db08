use thiserror::Error;

use dcmg_core::certify::{CertificateError, CertifyError};
use dcmg_core::equilibrium::EquilibriumError;
use dcmg_core::model::ModelError;
use dcmg_core::sim::SimError;
use dcmg_core::sweep::{BoundsError, SweepError};
use dcmg_core::uncertainty::UncertaintyError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_NOT_CERTIFIED: u8 = 1;
pub const EXIT_INCONCLUSIVE: u8 = 2;
/// Unreadable, malformed or invalid input files and usage errors.
pub const EXIT_INPUT: u8 = 64;
/// Invalid numerical parameters.
pub const EXIT_PARAM: u8 = 65;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Netlist { path: String, source: ModelError },
    #[error("{path}: {source}")]
    Profile { path: String, source: SimError },
    #[error("{path}: {source}")]
    Certificate {
        path: String,
        source: CertificateError,
    },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Param(String),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. }
            | CliError::Netlist { .. }
            | CliError::Profile { .. }
            | CliError::Certificate { .. }
            | CliError::Input(_)
            | CliError::Uncertainty(_) => EXIT_INPUT,
            CliError::Param(_) | CliError::Bounds(_) | CliError::Certify(_) => EXIT_PARAM,
            CliError::Sim(
                SimError::Dt(_) | SimError::TEnd(_) | SimError::Stride | SimError::Ripple(_),
            ) => EXIT_PARAM,
            CliError::Sim(SimError::Io(_)) => EXIT_INPUT,
            CliError::Sim(_) => EXIT_NOT_CERTIFIED,
            CliError::Sweep(SweepError::Inconclusive { .. }) => EXIT_INCONCLUSIVE,
            CliError::Sweep(SweepError::Step(_) | SweepError::Start(_)) => EXIT_PARAM,
            CliError::Sweep(SweepError::Uncertainty(_)) => EXIT_INPUT,
            CliError::Sweep(_) => EXIT_NOT_CERTIFIED,
            CliError::Equilibrium(EquilibriumError::PowerLength { .. }) => EXIT_PARAM,
            CliError::Equilibrium(EquilibriumError::NoSamples) => EXIT_PARAM,
            CliError::Equilibrium(_) => EXIT_NOT_CERTIFIED,
        }
    }
}
