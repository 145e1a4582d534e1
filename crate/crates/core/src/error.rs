use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes of operands do not line up.
    #[error("dimension error in {op} (node {node}): {detail}")]
    Dimension {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A caller broke an API contract (non-scalar backward output, duplicate leaf, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value outside distribution support: {0}")]
    Support(String),

    /// The KL divergence has no closed form for this pair; use a Monte Carlo estimate.
    #[error("no closed-form KL for site {site}: prior is {prior}")]
    UnsupportedClosedForm { site: String, prior: &'static str },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable name of the variant, for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Support(_) => "support",
            Error::UnsupportedClosedForm { .. } => "unsupported_closed_form",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
