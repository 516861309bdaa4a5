use thiserror::Error;

/// Errors produced by the simulators, solvers and experiment runners.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A parameter invariant does not hold. The message names the invariant.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Argument outside the domain of a closed-form function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Time or space grid does not resolve the problem scales.
    #[error("grid error: {0}")]
    Grid(String),

    /// A simulated state became NaN or infinite.
    #[error("non-finite state at step {step} (t = {time}): {what}")]
    NonFinite {
        step: usize,
        time: f64,
        what: &'static str,
    },

    /// Discrete mass balance broke during a density evolution.
    #[error("mass drift at t = {time}: total mass {mass}, per-step change {step_change:e}")]
    MassDrift {
        time: f64,
        mass: f64,
        step_change: f64,
    },

    /// Negative density below the numerical floor.
    #[error("negative density {value:e} in cell {cell} at t = {time}")]
    Negative { cell: usize, time: f64, value: f64 },

    /// Two path records that should share a grid do not.
    #[error("misaligned path records: {0}")]
    Misaligned(String),

    /// A Monte Carlo sample came out non-finite; the seed reproduces it.
    #[error("non-finite sample for epsilon = {epsilon} (seed {seed}, path {path})")]
    NonFiniteSample { epsilon: f64, seed: u64, path: u64 },

    /// Not enough usable points for a log-log fit.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-parsable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParam(_) => "invalid-param",
            Error::Domain(_) => "domain",
            Error::Grid(_) => "grid",
            Error::NonFinite { .. } => "non-finite",
            Error::MassDrift { .. } => "mass-drift",
            Error::Negative { .. } => "negative-density",
            Error::Misaligned(_) => "misaligned",
            Error::NonFiniteSample { .. } => "non-finite-sample",
            Error::Fit(_) => "fit",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Whether this is a numerical failure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::MassDrift { .. }
                | Error::Negative { .. }
                | Error::NonFiniteSample { .. }
                | Error::Fit(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
