use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("ODE integration failed after t = {last_good_t}: {reason}")]
    Integration { last_good_t: f64, reason: String },

    #[error("trajectory has no interior viral-load peak")]
    NoPeak,

    #[error("subcritical parameters (R0 = {r0}): no time-shift law exists")]
    Subcritical { r0: f64 },

    #[error("only {survivors} surviving branching-process paths (need at least {required})")]
    InsufficientSurvivors { survivors: usize, required: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("log-integrand is not concave at its mode (h'' = {second_derivative})")]
    Curvature { second_derivative: f64 },

    #[error("surrogate input {input:?} lies outside the training hypercube")]
    Extrapolation { input: [f64; 3] },

    #[error("training failed: {0}")]
    Training(String),

    #[error("hypercube acceptance rate {rate:.4} is below 1%")]
    Bounds { rate: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("chain initialization failed: {0}")]
    Initialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
