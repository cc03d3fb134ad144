use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("ranking case error: {0}")]
    Case(String),

    #[error("entity has no rows")]
    EmptyEntity,

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint file is truncated")]
    TruncatedFile,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable name of the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDataset => "EmptyDataset",
            Error::Parse { .. } => "ParseError",
            Error::InvalidSchema(_) => "InvalidSchema",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::Numeric(_) => "NumericError",
            Error::ContractViolation(_) => "ContractViolation",
            Error::Config(_) => "ConfigError",
            Error::Label(_) => "LabelError",
            Error::Case(_) => "CaseError",
            Error::EmptyEntity => "EmptyEntity",
            Error::BadMagic => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::TruncatedFile => "TruncatedFile",
            Error::Io(_) => "IoError",
            Error::Json(_) => "ParseError",
            Error::Csv(_) => "ParseError",
        }
    }
}
