use thiserror::Error;

use crate::ode::OdeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ode(#[from] OdeError),

    #[error("integration failed on segment {segment}: {source}")]
    Segment { segment: usize, source: OdeError },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Leading Floquet pair could not be isolated. Ritz values are `(re, im)`.
    #[error("Floquet eigensolver did not converge (residual {residual:e}); Ritz values {ritz:?}")]
    FloquetNotConverged { ritz: Vec<(f64, f64)>, residual: f64 },

    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("dense assembly of a {dim}x{dim} operator exceeds the limit {limit}")]
    DenseLimit { dim: usize, limit: usize },

    #[error("continuation step size fell below ds_min = {ds_min:e}")]
    StepSizeUnderflow { ds_min: f64 },

    #[error("degenerate tangent: consecutive continuation points coincide")]
    DegenerateTangent,

    #[error("model file line {line}: {msg}")]
    ModelParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ode(_) => "integration",
            Error::Segment { .. } => "segment_integration",
            Error::InvalidInput(_) => "invalid_input",
            Error::FloquetNotConverged { .. } => "floquet_not_converged",
            Error::NewtonDiverged { .. } => "newton_diverged",
            Error::Singular(_) => "singular",
            Error::DenseLimit { .. } => "dense_limit",
            Error::StepSizeUnderflow { .. } => "step_size_underflow",
            Error::DegenerateTangent => "degenerate_tangent",
            Error::ModelParse { .. } => "model_parse",
            Error::Io(_) => "io",
        }
    }
}
