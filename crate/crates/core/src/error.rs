use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training dataset is empty")]
    EmptyDataset,

    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("malformed parameter file: {0}")]
    MalformedFile(String),

    #[error("unknown sensor node {0} (expected 1..=4)")]
    UnknownNode(usize),

    #[error("non-finite state: {0}")]
    NonFiniteState(String),

    #[error("innovation covariance is not SPD: {0}")]
    SingularInnovation(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("{found} cannot be used for {operation}")]
    StageOrder {
        operation: &'static str,
        found: String,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{context}: {source}")]
    Step {
        context: StepContext,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attaches the run step at which an error happened.
    pub fn at_step(self, context: StepContext) -> Self {
        Error::Step {
            context,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Where in an experiment run an error surfaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepContext {
    pub variant: String,
    pub run: usize,
    pub k: i64,
    pub node: Option<usize>,
    pub phase: &'static str,
}

impl fmt::Display for StepContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} run {} step k={} {}",
            self.variant, self.run, self.k, self.phase
        )?;
        if let Some(node) = self.node {
            write!(f, " at node {}", node + 1)?;
        }
        Ok(())
    }
}
