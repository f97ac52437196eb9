use thiserror::Error;

/// Errors raised anywhere in the dynamics pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("shape mismatch: {left:?} vs {right:?} ({op})")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("tracking failed at frame {frame}: {message}")]
    Tracking { frame: usize, message: String },
    #[error("simulation blow-up at t={time:.4}s: max speed {speed:.3} m/s")]
    BlowUp { time: f64, speed: f64 },
    #[error("non-finite value in rollout at step {step}: {message}")]
    NonFinite { step: usize, message: String },
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Validation(_)
                | Error::Parameter(_)
                | Error::Contract(_)
                | Error::Shape { .. }
                | Error::Capacity(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
