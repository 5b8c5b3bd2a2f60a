use lfo_core::agent::AgentError;
use lfo_core::delay::DelayError;
use lfo_core::env::EnvError;
use lfo_core::grid::GridError;
use lfo_core::metrics::MetricsError;
use lfo_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl LabError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }

    /// Process exit status: 2 for anything the user can fix in the inputs, 3
    /// when the computation itself breaks down.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<GridError> for LabError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::NotConverged { .. }
            | GridError::SingularJacobian(_)
            | GridError::SingularReduction(_)
            | GridError::FieldLimit { .. } => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<DelayError> for LabError {
    fn from(e: DelayError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<EnvError> for LabError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Grid(g) => g.into(),
            EnvError::Delay(d) => d.into(),
            EnvError::Config(_) | EnvError::InfeasiblePv(_) => Self::Config(e.to_string()),
            EnvError::BadAction { .. } | EnvError::NotRunning => Self::Numerical(e.to_string()),
        }
    }
}

impl From<AgentError> for LabError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::NonFinite(_) | AgentError::InsufficientSamples { .. } => {
                Self::Numerical(e.to_string())
            }
            AgentError::Io(source) => Self::Io {
                context: "checkpoint".into(),
                source,
            },
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for LabError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Env(e) => e.into(),
            TrainError::Agent(e) => e.into(),
            TrainError::Hook(m) => Self::Io {
                context: "episode hook".into(),
                source: std::io::Error::other(m),
            },
        }
    }
}

impl From<MetricsError> for LabError {
    fn from(e: MetricsError) -> Self {
        Self::Numerical(e.to_string())
    }
}
