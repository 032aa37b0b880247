use thiserror::Error;

use crate::exprlang::ParseError;
use crate::scalars::DomainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] DomainError),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed problem file; `line` is 1-based.
    #[error("line {line}: {message}")]
    Problem { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A hypothesis of a check did not hold, e.g. a section that is not closed.
    #[error("precondition failed: {what} (defect {defect:e} exceeds tolerance {tolerance:e})")]
    Precondition { what: String, defect: f64, tolerance: f64 },

    #[error("Lagrangian is singular: minimum pivot {min_pivot:e} below threshold {threshold:e}")]
    Regularity { min_pivot: f64, threshold: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Iteration { iterations: usize, residual: f64 },

    #[error("k-vector field is not integrable: commutator defect {defect:e} exceeds tolerance {tolerance:e}")]
    Integrability { defect: f64, tolerance: f64 },

    #[error("integration blew up at node {node:?} (t = {t:?})")]
    BlowUp { node: Vec<usize>, t: Vec<f64> },

    #[error("at node {node:?} (t = {t:?}): {source}")]
    AtNode {
        node: Vec<usize>,
        t: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
