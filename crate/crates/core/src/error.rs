use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {name} = {value} ({constraint})")]
    Domain {
        name: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical blow-up at step {step}: non-finite value in profile")]
    BlowUp { step: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("ellipticity violated at (t={t}, x={x}): {detail}")]
    Ellipticity { t: f64, x: f64, detail: String },

    #[error("covariance matrix is ill-conditioned (condition number {condition:.3e})")]
    Conditioning { condition: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, constraint: impl Into<String>) -> Self {
        Error::Domain {
            name,
            value,
            constraint: constraint.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
