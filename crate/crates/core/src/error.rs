use thiserror::Error;

use crate::model::ModelFamily;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the least-squares model fitter.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{family} has {params} parameters but only {doses} distinct doses")]
    Underdetermined {
        family: ModelFamily,
        params: usize,
        doses: usize,
    },
    #[error("design matrix is rank deficient")]
    DegenerateDesign,
    #[error("{family} fit did not converge: {reason}")]
    ConvergenceFailure { family: ModelFamily, reason: String },
    #[error("{0} has fixed shape constants and cannot be fitted")]
    NotFittable(ModelFamily),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model means are constant over the doses; no contrast is defined")]
    DegenerateContrast,
    #[error("pooled within-group variance is zero")]
    DegenerateVariance,
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Numerical failures (as opposed to bad input) map to a distinct CLI exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDomain(_) | Error::DegenerateVariance | Error::DegenerateContrast | Error::Fit(_)
        )
    }
}
