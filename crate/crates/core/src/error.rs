use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(
        "invalid error demand: delta={delta}, Delta={tolerance} (both must be positive and finite)"
    )]
    InvalidDemand { delta: f64, tolerance: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("frequency {f} Hz outside [{f_min}, {f_max}]")]
    FrequencyOutOfRange { f: f64, f_min: f64, f_max: f64 },

    #[error("transmission rate must be positive, got {0}")]
    ZeroRate(f64),

    #[error("infeasible time split: {0}")]
    InfeasibleSplit(String),

    #[error("Lagrange multiplier must be positive, got {0}")]
    InvalidMultiplier(f64),

    #[error("infeasible time budget: theta_min={theta_min} + pi_min={pi_min} > 1")]
    InfeasibleBudget { theta_min: f64, pi_min: f64 },

    #[error("invalid variance schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite value in forward pass")]
    NumericalOverflow,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },

    #[error("covariance is not positive semidefinite (min eigenvalue {0})")]
    InvalidCovariance(f64),

    #[error("device {device}: {source}")]
    Device {
        device: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn on_device(self, device: usize) -> Error {
        Error::Device {
            device,
            source: Box::new(self),
        }
    }

    /// True when the root cause is an infeasible allocation.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::InfeasibleBudget { .. } | Error::InfeasibleSplit(_) => true,
            Error::Device { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
