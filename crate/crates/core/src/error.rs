use std::path::PathBuf;

use thiserror::Error;

use crate::odmr_analysis::LorentzianFit;
use crate::spin_model::Basis;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("basis mismatch: expected {expected:?}, found {found:?}")]
    BasisMismatch { expected: Basis, found: Basis },

    #[error(
        "drive invalid: axial Zeeman splitting gamma_e*Bz = {zeeman_mhz:.4} MHz must exceed \
         the per-tone Rabi frequency Omega = {omega_mhz:.4} MHz"
    )]
    DriveInvalid { zeeman_mhz: f64, omega_mhz: f64 },

    #[error("steady state is not unique: null space of the Liouvillian has dimension {dimension}")]
    DegenerateSteadyState { dimension: usize },

    #[error("time integration failed at t = {reached_us:.6e} us (target {target_us:.6e} us): {reason}")]
    IntegrationFailed {
        reached_us: f64,
        target_us: f64,
        reason: String,
    },

    #[error("Lorentzian fit did not converge: {reason}")]
    FitFailed {
        reason: String,
        best: Option<Box<LorentzianFit>>,
    },

    #[error("three-point denominator {denominator:.3e} is at background level")]
    BackgroundLevel { denominator: f64 },

    #[error("six-point slope denominator {denominator:.3e} is below the stability floor {floor:.3e}")]
    UnstableDenominator { denominator: f64, floor: f64 },

    #[error("time step {dt:.3e} s exceeds the stability limit {limit:.3e} s")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty window: {0}")]
    EmptyWindow(String),

    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::ShapeMismatch(_)
                | Error::DriveInvalid { .. }
        )
    }
}
