use thiserror::Error;

/// Errors raised by the simulation, regression and PDE routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: dimension mismatches, out-of-range indices, bad tables.
    #[error("input error: {0}")]
    Input(String),
    /// A configuration that is well-formed but cannot be run as requested.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values, blowup, or an iterative routine that did not converge.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The coefficient matrix failed to be positive definite.
    #[error("ellipticity violation: {0}")]
    Ellipticity(String),
    /// A regression problem that cannot be solved with the given data.
    #[error("ill-posed regression: {0}")]
    IllPosed(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user-supplied configuration rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Config(_) | Error::IllPosed(_))
    }
}
