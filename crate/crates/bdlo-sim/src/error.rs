use thiserror::Error;

/// Unified error type for the simulation library.
#[derive(Debug, Error)]
pub enum SimError {
    /// Structural problem in a branch/junction description.
    #[error("topology: {0}")]
    Topology(String),

    /// Degenerate geometry: zero-length edges, antiparallel tangents,
    /// vanishing denominators.
    #[error("geometry: {0}")]
    Geometry(String),

    /// Array lengths or batch shapes that do not match the topology.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Material parameters that violate their domain (non-SPD matrix,
    /// non-positive stiffness, ...).
    #[error("invalid parameter: {0}")]
    Params(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative solve stopped without reaching its tolerance.
    #[error("no convergence: {context} (residual {residual:.3e} after {iterations} iterations)")]
    NonConvergence {
        context: String,
        residual: f64,
        iterations: usize,
    },

    /// Malformed input file; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl SimError {
    pub fn schema(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        SimError::Schema {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type SimResult<T> = Result<T, SimError>;
