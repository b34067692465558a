//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Malformed input data (CSV row, term grammar, config line).
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    /// Input violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Cross-product matrix is numerically rank deficient.
    #[error("singular system: smallest pivot {pivot:.3e}, condition estimate {condition:.3e}")]
    Singular { pivot: f64, condition: f64 },

    /// Iterative fit ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (last step {last_change:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        last_change: f64,
    },

    /// A leverage of 1 makes the standardized deviance component undefined.
    #[error("degenerate leverage h[{index}] = {value} (must be < 1)")]
    DegenerateLeverage { index: usize, value: f64 },

    /// The Gaussian quadratic-exponential moment diverges for k2 <= 0.
    #[error("infeasible moment: 1 - 2*sigma^2*alpha2 = {k2:.6e} <= 0, the integral diverges")]
    InfeasibleMoment { k2: f64 },

    /// Model form outside what the closed-form moment propagation supports.
    #[error("unsupported form: {0}")]
    UnsupportedForm(String),

    /// Pearson correlation undefined because one series has zero variance.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// No point satisfies the mean-on-target constraint inside the bounds.
    #[error(
        "no feasible point: closest |E(Y) - target| = {closest_gap:.4} at \
         ({closest_x1:.4}, {closest_x2:.4}, {closest_x3:.4})"
    )]
    NoFeasiblePoint {
        closest_x1: f64,
        closest_x2: f64,
        closest_x3: f64,
        closest_gap: f64,
        closest_var: f64,
    },

    /// Too many replicate failures inside a simulation loop.
    #[error("simulation failed: {failed} of {total} replicate fits failed")]
    SimulationFailed { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
