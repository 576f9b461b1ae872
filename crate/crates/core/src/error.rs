use thiserror::Error;

/// Errors raised by the core library. Numeric payloads are stored as `f64`
/// regardless of the scalar type the computation ran in.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("{value} is outside the domain of {function} (must exceed {lower})")]
    Domain {
        function: String,
        lower: f64,
        value: f64,
    },

    #[error("domain error at {entity}: {source}")]
    EntityDomain {
        entity: String,
        #[source]
        source: Box<Error>,
    },

    #[error("state corrupted: {0}")]
    StateCorruption(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("solver failed to converge: {message} (last iterates: {iterates:?})")]
    Solver {
        message: String,
        iterates: Vec<f64>,
    },

    #[error("trajectory diverged at t = {time}: {message}")]
    Divergence { time: f64, message: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("control cost matrix is singular: {0}")]
    SingularControlCost(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("trajectory settled at a different equilibrium than the reference (max deviation {deviation})")]
    EquilibriumMismatch { deviation: f64 },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn at(self, entity: impl Into<String>) -> Self {
        match self {
            e @ Error::Domain { .. } => Error::EntityDomain {
                entity: entity.into(),
                source: Box::new(e),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(context, expected, actual))
    }
}
