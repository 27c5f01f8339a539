use thiserror::Error;

/// Errors raised anywhere in the influence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate embedding: norm {norm:e} below threshold")]
    DegenerateEmbedding { norm: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ill-conditioned operator: Cholesky failed, smallest eigenvalue estimate {min_eigenvalue:e}")]
    IllConditioned { min_eigenvalue: f64 },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("indeterminate ratio: {0}")]
    IndeterminateRatio(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("empty subset")]
    EmptySubset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code for the CLI: 1 for validation and IO problems,
    /// 2 for numeric or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateEmbedding { .. }
            | Error::Numeric(_)
            | Error::IllConditioned { .. }
            | Error::Convergence { .. }
            | Error::IndeterminateRatio(_)
            | Error::TrainingDiverged { .. }
            | Error::DegenerateProbe(_) => 2,
            _ => 1,
        }
    }

    /// Short machine-readable code used in `ERROR <code> <message>` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::DegenerateEmbedding { .. } => "degenerate-embedding",
            Error::Numeric(_) => "numeric",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::Convergence { .. } => "convergence",
            Error::IndeterminateRatio(_) => "indeterminate-ratio",
            Error::Contract(_) => "contract",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::DegenerateProbe(_) => "degenerate-probe",
            Error::EmptySubset => "empty-subset",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
