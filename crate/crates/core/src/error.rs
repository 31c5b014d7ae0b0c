use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain the operation is defined on.
    #[error("input domain: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition (shapes, tags, routing).
    #[error("contract: {0}")]
    Contract(String),

    /// A computed scalar was NaN or infinite.
    #[error("non-finite {what}: {value}")]
    NonFinite { what: String, value: f64 },

    /// The x0 conversion was asked to divide by a zero signal coefficient.
    #[error("singular conversion at timestep {t}: alpha_bar is zero")]
    SingularConversion { t: usize },

    /// A training loop produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),

    /// A checkpoint does not match the architecture, schedule or grid it is used with.
    #[error("compatibility: {0}")]
    Compatibility(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            value,
        })
    }
}
