use thiserror::Error;

/// Errors raised by the traffic model and everything built on top of it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A post-step state left its admissible range. This points at a flow
    /// formula bug or at parameters for which the ACTM is not well posed.
    #[error("model consistency violated in cell {cell}: {quantity} = {value}")]
    Consistency {
        cell: usize,
        quantity: &'static str,
        value: f64,
    },
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("non-finite network input: {0:?}")]
    NonFiniteInput([f64; 4]),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse scenario {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("malformed network parameter file: {0}")]
    ParamFile(String),
}

impl ScenarioError {
    pub(crate) fn invalid(field: &str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("no starting points supplied")]
    NoStarts,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid bounds: {0}")]
    Bounds(String),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
}

/// Failure of a controller while producing a candidate.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Network(#[from] TrainingError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

/// Failure of a closed-loop experiment.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run log: {0}")]
    Log(String),
    #[error("unknown controller `{0}`")]
    UnknownController(String),
}
