use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {0} not found in graph")]
    NotFound(usize),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention mask error: {0}")]
    Mask(String),

    #[error("backward already run on this graph; build a new graph before calling it again")]
    StaleGraph,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("no parent candidates for target {0}")]
    NoCandidates(usize),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
