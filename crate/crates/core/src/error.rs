use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An exponent was evaluated outside the strip on which it is finite.
    #[error("argument with Im(z) = {im} lies outside the exponent strip ({bound})")]
    StripDomain { im: f64, bound: String },

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("{what} = {value} is outside the admissible range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("time {time} is not aligned with the maturity step {step}")]
    Alignment { time: f64, step: f64 },

    #[error("codebook fails the necessary Pi conditions ({violations} violations, worst {worst:e})")]
    PiCheckFailed { violations: usize, worst: f64 },

    #[error("insufficient resolution: edge value {edge_value:e} exceeds decay tolerance {tolerance:e}")]
    Resolution { edge_value: f64, tolerance: f64 },

    #[error("strike {strike} (log-moneyness {x}) is outside the priced range [{min}, {max}]")]
    Extrapolation { strike: f64, x: f64, min: f64, max: f64 },

    #[error("clipped {fraction:e} of the modified price mass (limit {limit:e})")]
    ClipExceeded { fraction: f64, limit: f64 },

    #[error("complex logarithm lost its branch at T = {maturity}, u = {frequency} (|z| = {modulus:e})")]
    BranchFailure {
        maturity: f64,
        frequency: f64,
        modulus: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {time} (h = {step:e})")]
    StepUnderflow { time: f64, step: f64 },

    #[error("internal numerical error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors that stem from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Resolution { .. }
                | Error::ClipExceeded { .. }
                | Error::BranchFailure { .. }
                | Error::NonConvergence { .. }
                | Error::StepUnderflow { .. }
                | Error::Internal(_)
                | Error::PiCheckFailed { .. }
        )
    }
}
