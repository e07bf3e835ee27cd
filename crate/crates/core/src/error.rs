use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is not symmetric (relative defect {defect:.3e})")]
    Asymmetric { defect: f64 },

    #[error("closed loop is not stable (spectral radius {rho:.12})")]
    Unstable { rho: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    Numerical { what: &'static str, iterations: usize },

    #[error("{what} is not positive definite (smallest eigenvalue {min_eig:.6e})")]
    Indefinite { what: &'static str, min_eig: f64 },

    #[error("{what}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Riccati solution rejected: closed loop spectral radius {rho:.9}")]
    SolutionRejected { rho: f64 },

    #[error("L outside the admissible set: {0}")]
    Domain(String),

    #[error("stability lost at {location} (spectral radius {rho:.9}); reduce the stepsize")]
    StabilityLost { location: String, rho: f64 },

    #[error("perturbed sample {index} is destabilizing (spectral radius {rho:.9}); shrink the smoothing radius")]
    Sample { index: usize, rho: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
