use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("mesh file: {0}")]
    Parse(String),

    /// Model failed validation; the message names the offending entity.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("element distortion: non-positive jacobian {det:.3e} at corner {corner}")]
    ElementDistortion { corner: usize, det: f64 },

    #[error("parameter binding: {0}")]
    Binding(String),

    #[error("parameter outside the admissible box: {0}")]
    Domain(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error(
        "reduced stiffness is not positive definite (pivot {pivot}); \
         the structure has rigid-body modes, review the constraints"
    )]
    IndefiniteStiffness { pivot: usize },

    #[error("mass matrix is not positive definite on the free dofs (pivot {pivot})")]
    IndefiniteMass { pivot: usize },

    #[error("eigensolver did not converge after {steps} Lanczos steps (residuals {residuals:?})")]
    NoConvergence { steps: usize, residuals: Vec<f64> },

    #[error("dense oracle refused: {n} free dofs exceeds the limit of {limit}")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("reduced model reached dimension {dim} with only {digits:.1} correct digits")]
    RomAccuracy { dim: usize, digits: f64 },

    #[error("reduced model inconsistency: {0}")]
    RomInconsistent(String),

    #[error("modal target: {0}")]
    Target(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IndefiniteStiffness { .. }
                | Error::IndefiniteMass { .. }
                | Error::NoConvergence { .. }
                | Error::RomAccuracy { .. }
                | Error::RomInconsistent(_)
                | Error::OracleTooLarge { .. }
        )
    }
}
