use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error ({location}): {rule}")]
    Validation { location: String, rule: String },

    #[error(
        "energy overflow: exponent {exponent:.3} exceeds {limit} (volume {bits:.6e} bits is not a feasible upload)"
    )]
    Overflow {
        bits: f64,
        exponent: f64,
        limit: f64,
    },

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error(
        "numerical failure in {context}: residual {residual:.3e} after {iterations} iterations"
    )]
    Numerical {
        context: String,
        residual: f64,
        iterations: usize,
    },

    #[error("load model fit failed: {0}")]
    Fit(String),

    #[error("accuracy requirement {requirement} not reachable; best achievable is {best}")]
    InfeasibleRequirement { requirement: f64, best: f64 },

    #[error("training diverged at round {round}, step {step} (non-finite loss); lower the learning rate")]
    Divergence { round: usize, step: usize },

    #[error("grid search needs {points} lattice points, above the guard of {limit}")]
    GridTooLarge { points: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(location: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            rule: rule.into(),
        }
    }
}
