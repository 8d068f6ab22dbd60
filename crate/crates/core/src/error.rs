use thiserror::Error;

/// Errors raised by the estimation pipeline and its I/O layers.
#[derive(Debug, Error)]
pub enum FlmmError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("argument {name} = {value} is outside {domain}")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        domain: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("no signal: every estimated eigenvalue is nonpositive")]
    NoSignal,

    #[error("no retained components")]
    NoComponents,

    #[error("zero denominator in relative error; use an absolute error for this quantity")]
    ZeroDenominator,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlmmError {
    /// Stable machine-readable tag used in CLI error reports and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            FlmmError::Schema(_) => "schema",
            FlmmError::Validation { .. } => "validation",
            FlmmError::InvalidData(_) => "invalid_data",
            FlmmError::OutOfDomain { .. } => "out_of_domain",
            FlmmError::Dimension(_) => "dimension",
            FlmmError::Config(_) => "config",
            FlmmError::DegenerateDesign(_) => "degenerate_design",
            FlmmError::NoSignal => "no_signal",
            FlmmError::NoComponents => "no_components",
            FlmmError::ZeroDenominator => "zero_denominator",
            FlmmError::Numerical(_) => "numerical",
            FlmmError::Io(_) => "io",
            FlmmError::Csv(_) => "csv",
            FlmmError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, FlmmError>;
