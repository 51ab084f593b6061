use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last KKT residual {kkt_residual:.3e})")]
    Convergence { sweeps: usize, kkt_residual: f64 },

    #[error("perfect separation detected in logistic regression; use a penalized learner")]
    Separation,

    #[error("fold {fold}: training complement has no {arm} rows; use stratified folds")]
    Stratification { fold: usize, arm: &'static str },

    #[error("no local data at query {query:?}: kernel mass {mass:.3e} is below the density floor")]
    NoLocalData { query: Vec<f64>, mass: f64 },

    #[error("density floor violated at {} observation(s) (first rows {:?}); the bandwidth is too small", rows.len(), &rows[..rows.len().min(5)])]
    DensityFloor { rows: Vec<usize> },

    #[error("bandwidth selection failed: {0}")]
    BandwidthSelection(String),

    #[error("all ensemble members failed: {}", .0.join("; "))]
    AllMembersFailed(Vec<String>),

    #[error("{failed} of {total} Monte Carlo replications failed (first: {first})")]
    ReplicationFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or input data.
    Input,
    /// Failure while computing.
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Input,
            _ => ErrorKind::Runtime,
        }
    }

    /// Name of the module that raised the error, for diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Csv(_) | Error::Io(_) => "data",
            Error::Validation(_) | Error::Json(_) => "config",
            Error::Resource(_) => "data",
            Error::Numerical(_) | Error::Convergence { .. } | Error::Separation => "learners",
            Error::AllMembersFailed(_) => "learners",
            Error::Stratification { .. } => "crossfit",
            Error::NoLocalData { .. } | Error::BandwidthSelection(_) => "kernel",
            Error::DensityFloor { .. } => "ate",
            Error::ReplicationFailures { .. } => "sim",
        }
    }

    /// A short remediation hint.
    pub fn hint(&self) -> &'static str {
        match self {
            Error::Config(_) => "check the column-role configuration against the file header",
            Error::Parse { .. } => "numeric columns must contain only numbers with '.' as decimal separator",
            Error::Validation(_) => "fix the offending input or configuration value",
            Error::Resource(_) => "lower the expansion degree or disable interactions",
            Error::Numerical(_) => "use a positive penalty (lambda > 0)",
            Error::Convergence { .. } => "raise the sweep limit or loosen the tolerance",
            Error::Separation => "use lasso_logit or ridge_logit for the propensity score",
            Error::Stratification { .. } => "enable stratified folds or lower the fold count",
            Error::NoLocalData { .. } => "move the query inside the moderator support or increase the bandwidth",
            Error::DensityFloor { .. } => "increase the bandwidth",
            Error::BandwidthSelection(_) => "supply a wider bandwidth grid or a manual bandwidth",
            Error::AllMembersFailed(_) => "add a more robust learner (e.g. ridge or forest) to the ensemble",
            Error::ReplicationFailures { .. } => "inspect the per-replication errors in the report",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "check file paths and formats",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
