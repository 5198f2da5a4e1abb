use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, estimators and samplers.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter, scenario or setting violates its declared invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The stator equations have no unique solution.
    #[error("singular algebraic system (determinant {det:e})")]
    Singular { det: f64 },

    /// The steady-state root solve did not converge to a physical root.
    #[error("steady-state initialization failed: {reason} (residual {residual:e})")]
    Initialization { reason: String, residual: f64 },

    /// Some state became non-finite during integration.
    #[error("numerical blow-up at step {step} (t = {time} s)")]
    BlowUp { step: usize, time: f64 },

    /// Every ensemble walker sits at the same point.
    #[error("degenerate ensemble: all walkers are identical")]
    DegenerateEnsemble,

    /// No walker start with finite posterior was found.
    #[error("sampler initialization failed for walker {walker} after {attempts} attempts")]
    SamplerInit { walker: usize, attempts: usize },

    #[error("empty sample set after burn-in")]
    EmptySample,

    #[error("mismatched parameterization: {0}")]
    Mismatch(String),

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by inputs rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Mismatch(_) | Error::Format { .. } | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
