use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("requested {count} orthonormal vectors in dimension {dim}")]
    DimensionExceeded { count: usize, dim: usize },
    #[error("embedding table must contain at least one vector")]
    EmptyTable,
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("corpus needs {needed} dimensions but d = {dim}")]
    Capacity { needed: usize, dim: usize },
    #[error("recipe `{recipe}` cannot be assembled from this corpus: {reason}")]
    Recipe { recipe: String, reason: String },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("feature similarity undefined: zero-norm image")]
    UndefinedSimilarity,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("depth {depth} out of range for a stack of {layers} layers")]
    DepthOutOfRange { depth: usize, layers: usize },
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
