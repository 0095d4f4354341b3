use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("diffusion matrix is not positive definite at t = {t}")]
    DiffusionNotPositiveDefinite { t: f64 },

    #[error("non-finite {what} at t = {t} (step {step}), state = {state:?}")]
    NonFinite {
        what: &'static str,
        t: f64,
        step: usize,
        state: Vec<f64>,
    },

    #[error("matrix {name} is singular or ill-conditioned at t = {t} (condition number {cond:e})")]
    SingularMatrix {
        name: &'static str,
        t: f64,
        cond: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("every log-weight is -inf at measurement step {step}; the proposal cannot explain the observation")]
    Degenerate { step: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("measurement step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e @ Error::Degenerate { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for failures caused by the numerics (degeneracy, NaN, singular
    /// matrices) rather than by invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::AtStep { source, .. } => source.is_numerical(),
            Error::NonFinite { .. }
            | Error::SingularMatrix { .. }
            | Error::Degenerate { .. }
            | Error::DiffusionNotPositiveDefinite { .. }
            | Error::InvalidWeights(_) => true,
            _ => false,
        }
    }
}
