use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid defect: {0}")]
    InvalidDefect(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("contour quadrature did not converge with {nodes} nodes (last change {change:.3e})")]
    Quadrature { nodes: usize, change: f64 },

    #[error("resolvent is ill-conditioned: z is {distance:.3e} from the spectrum")]
    IllConditioned { distance: f64 },

    #[error("non-interpenetration violated: sites {0} and {1} (ratio {2:.4})")]
    Interpenetration(usize, usize, f64),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Option<Box<crate::equilibrium::EquilibriumSolution>>,
    },

    #[error("jacobian is singular or unstable (smallest singular value {smallest_singular_value:.3e})")]
    Stability { smallest_singular_value: f64 },

    #[error("rate fit needs at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("eigendecomposition failed")]
    Eigen,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    pub(crate) fn check_index(index: usize, len: usize) -> Result<()> {
        if index < len {
            Ok(())
        } else {
            Err(Error::Index { index, len })
        }
    }
}
