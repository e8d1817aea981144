use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An architecture, layer or experiment setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A layer received a tensor whose shape it cannot consume.
    #[error("shape mismatch at layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    /// Caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data (labels out of range, empty batches, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Cosine similarity requested for a zero vector.
    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    /// CKA requested for an input without variance.
    #[error("CKA undefined: {0}")]
    UndefinedCka(String),

    /// Too few clients can hold the stage model in memory.
    #[error(
        "stage {stage} infeasible: {eligible} clients fit the {required_bytes}-byte stage model, \
         but at least {min_eligible} must participate"
    )]
    Infeasible {
        stage: usize,
        eligible: usize,
        min_eligible: usize,
        required_bytes: u64,
    },

    /// Cohort cannot be drawn from the eligible set.
    #[error("selection error: {0}")]
    Selection(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(layer: usize, message: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            message: message.into(),
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::UndefinedSimilarity(_) => "undefined_similarity",
            Error::UndefinedCka(_) => "undefined_cka",
            Error::Infeasible { .. } => "infeasible",
            Error::Selection(_) => "selection",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
