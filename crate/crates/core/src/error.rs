use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("population fractions sum to {sum}, expected 1")]
    FractionSum { sum: f64 },

    #[error("parameter `{field}` out of range: {value}")]
    ParameterRange { field: &'static str, value: f64 },

    #[error("population is not payoff-heterogeneous (beta or rho differ between types)")]
    NotPayoffHeterogeneous,

    #[error("no distribution can hold average money {m} (maximum holdable {max})")]
    Infeasible { m: f64, max: f64 },

    #[error("mean money of an unbounded threshold diverges at lambda = {lambda}")]
    DivergentMean { lambda: f64 },

    #[error(
        "value iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("best reply reached the truncation cap {cap}")]
    ThresholdUnbounded { cap: usize },

    #[error(
        "work decision is not a threshold: working at {money} is optimal but not at a lower level"
    )]
    NonThresholdReply { money: usize },

    #[error("best-reply dynamics increased a threshold: {from} -> {to}")]
    NonMonotoneDynamics { from: String, to: String },

    #[error("no crashed money supply found up to {cap}")]
    NoUpperBound { cap: f64 },

    #[error("state space has more than {limit} states")]
    StateSpaceTooLarge { limit: usize },

    #[error("reconstruction yields negative mass {value:e} at threshold {threshold}")]
    NegativeMass { threshold: usize, value: f64 },

    #[error("no explanation fits the observed distribution")]
    NoExplanation,

    #[error("best reply fell from {high} to {low} as the discount factor rose past {delta}")]
    NonMonotoneCalibration { delta: f64, high: usize, low: usize },

    #[error("no discount factor makes threshold {target} a best reply")]
    NoSolution { target: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable name of the variant, used by the CLI when echoing domain errors.
    pub fn name(&self) -> &'static str {
        match self {
            Error::FractionSum { .. } => "FractionSumError",
            Error::ParameterRange { .. } => "ParameterRangeError",
            Error::NotPayoffHeterogeneous => "NotPayoffHeterogeneous",
            Error::Infeasible { .. } => "Infeasible",
            Error::DivergentMean { .. } => "DivergentMean",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::ThresholdUnbounded { .. } => "ThresholdUnbounded",
            Error::NonThresholdReply { .. } => "NonThresholdReply",
            Error::NonMonotoneDynamics { .. } => "NonMonotoneDynamics",
            Error::NoUpperBound { .. } => "NoUpperBound",
            Error::StateSpaceTooLarge { .. } => "StateSpaceTooLarge",
            Error::NegativeMass { .. } => "NegativeMass",
            Error::NoExplanation => "NoExplanation",
            Error::NonMonotoneCalibration { .. } => "NonMonotoneCalibration",
            Error::NoSolution { .. } => "NoSolution",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }

    /// Errors that come from the model rather than from I/O or bad input files.
    pub fn is_domain(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Config(_)
        )
    }
}
