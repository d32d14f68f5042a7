use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("gain set too large to enumerate: {count} members exceed the cap of {cap}")]
    TooLargeToEnumerate { count: u128, cap: u128 },

    /// The value iteration left every bounded region; the control problem has no finite value.
    #[error("infinite value: iterate norm {norm:e} exceeded the divergence bound after {iterations} iterations")]
    InfiniteValue { iterations: usize, norm: f64 },

    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NotConverged {
        iterations: usize,
        last_step: f64,
        last_iterate: Vec<f64>,
    },

    #[error("no stabilizing gain in the feasible gain set")]
    NoStabilizingGain,

    #[error("insufficient excitation: correlation matrix condition estimate {condition:e}")]
    InsufficientExcitation { condition: f64 },

    #[error("implied model is not stabilizable within the problem class: {0}")]
    NotStabilizable(Box<Error>),

    #[error("linear program is infeasible")]
    LpInfeasible,

    #[error("linear program is unbounded (the control problem has no finite value)")]
    LpUnbounded,

    #[error("SSP conversion failed: {0}")]
    Conversion(String),

    #[error("improper SSP instance: value iteration diverged")]
    ImproperSsp,

    #[error("theorem hypothesis violated: rho * beta = {rho_beta} is not below 1")]
    HypothesisViolated { rho_beta: f64 },

    #[error("simulation blow-up in episode {episode} at step {step}")]
    SimulationBlowUp { episode: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by bad input or configuration, as opposed to numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Conversion(_)
                | Error::TooLargeToEnumerate { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("json: {e}"))
    }
}
