use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or builder argument outside its domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("index error: {0}")]
    Index(String),

    /// NaN or infinity where a finite value was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Inconsistent roster or network configuration.
    #[error("configuration error: {0}")]
    Config(String),
}

pub(crate) fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}
