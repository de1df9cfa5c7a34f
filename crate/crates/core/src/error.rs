use thiserror::Error;

/// Errors raised by model construction, spectral analysis, simulation and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BdpError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("inadmissible parameter: {0}")]
    Inadmissible(String),

    #[error("spectral degeneracy: {0}")]
    SpectralDegeneracy(String),

    #[error("rejection budget exhausted after {attempts} attempts (empirical survival fraction {survival_fraction})")]
    RejectionBudget {
        attempts: usize,
        survival_fraction: f64,
    },

    #[error("insufficient exposure for {0}")]
    InsufficientExposure(String),

    #[error("data inconsistent with the conditioned model: {0}")]
    DataInconsistency(String),

    #[error("optimization failed after {iterations} iterations: {reason}")]
    Optimization { iterations: usize, reason: String },

    #[error("identifiability failure: {0}")]
    Identifiability(String),
}

impl BdpError {
    /// Short machine-readable tag, used in error JSON emitted by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            BdpError::Argument(_) => "argument",
            BdpError::Inadmissible(_) => "inadmissible",
            BdpError::SpectralDegeneracy(_) => "spectral_degeneracy",
            BdpError::RejectionBudget { .. } => "rejection_budget",
            BdpError::InsufficientExposure(_) => "insufficient_exposure",
            BdpError::DataInconsistency(_) => "data_inconsistency",
            BdpError::Optimization { .. } => "optimization",
            BdpError::Identifiability(_) => "identifiability",
        }
    }
}

pub type Result<T> = std::result::Result<T, BdpError>;
