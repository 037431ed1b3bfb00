use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: u8, num_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no epithelium pixels to score")]
    NoEpithelium,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at iteration {iteration}: {snapshot}")]
    Divergence { iteration: u64, snapshot: String },
    #[error("no checkpoints to select from")]
    NoCheckpoints,
}

impl Error {
    /// Stable kebab-case identifier of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidLabel { .. } => "invalid-label",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidInput(_) => "invalid-input",
            Error::Config(_) => "config",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::NoEpithelium => "no-epithelium",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Divergence { .. } => "divergence",
            Error::NoCheckpoints => "no-checkpoints",
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
