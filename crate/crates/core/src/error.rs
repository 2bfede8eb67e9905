use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the solver and its building blocks.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Vector or matrix dimensions do not agree.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// An iterative solve stopped before reaching its tolerance.
    #[error(
        "solver did not converge after {iterations} iterations (relative residual {residual:e})"
    )]
    NotConverged { iterations: usize, residual: f64 },
    /// Non-finite values, singular matrices and similar numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A failure inside the main loop, tagged with the iteration index.
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Iteration index attached by the solver, if any.
    pub fn iteration(&self) -> Option<usize> {
        match self {
            Error::AtIteration { iteration, .. } => Some(*iteration),
            _ => None,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            got,
        })
    }
}
