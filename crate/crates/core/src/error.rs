use imp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{axis} extent {extent} is not divisible by patch size {patch}")]
    Indivisible {
        axis: &'static str,
        extent: usize,
        patch: usize,
    },
    #[error("{modality} sample: {detail}")]
    BadSample { modality: String, detail: String },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error(
        "positional table for {axis} has {buckets} buckets but {patches} patches were requested"
    )]
    Positions {
        axis: &'static str,
        buckets: usize,
        patches: usize,
    },
    #[error("drop ratio {0} outside [0, 1)")]
    DropRatio(f64),
    #[error("expert capacity k = floor({capacity} * {tokens} / {experts}) is zero; batch too small for expert count")]
    ZeroCapacity {
        capacity: f64,
        tokens: usize,
        experts: usize,
    },
    #[error("load-balance invariant violated in layer {layer}: expert {expert} holds {held} tokens, expected {expected}")]
    LoadBalance {
        layer: usize,
        expert: usize,
        held: usize,
        expected: usize,
    },
    #[error("router decision inconsistent with input: {0}")]
    Decision(String),
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown dataset {name:?}; registered: {registered:?}")]
    UnknownDataset {
        name: String,
        registered: Vec<String>,
    },
    #[error(
        "dataset {dataset:?} does not support objective {objective} (modalities {modalities:?})"
    )]
    UnsupportedObjective {
        dataset: String,
        objective: String,
        modalities: Vec<String>,
    },
    #[error("task registry is empty")]
    EmptyRegistry,
    #[error("non-finite loss {loss} on task {task:?} at step {step}")]
    Divergence { task: String, step: u64, loss: f64 },
    #[error("shard {path}: {detail}")]
    Shard { path: String, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(String),
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Tensor(_) => "tensor",
            CoreError::Indivisible { .. } | CoreError::BadSample { .. } => "input",
            CoreError::TokenOutOfRange { .. } | CoreError::Label { .. } => "input",
            CoreError::Positions { .. } | CoreError::DropRatio(_) => "input",
            CoreError::ZeroCapacity { .. }
            | CoreError::LoadBalance { .. }
            | CoreError::Decision(_) => "routing",
            CoreError::Config(_)
            | CoreError::UnknownDataset { .. }
            | CoreError::UnsupportedObjective { .. }
            | CoreError::EmptyRegistry => "config",
            CoreError::Divergence { .. } => "divergence",
            CoreError::Shard { .. } => "shard",
            CoreError::Checkpoint { .. } => "checkpoint",
            CoreError::Io { .. } => "io",
            CoreError::Serde(_) => "serde",
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
