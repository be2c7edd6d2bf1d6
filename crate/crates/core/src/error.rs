//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by graph construction, losses, attacks, training and I/O.
#[derive(Error, Debug)]
pub enum AtfsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty label list")]
    EmptyLabels,

    #[error("negative link weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },

    #[error("node id {id} out of range for graph with {nodes} nodes")]
    NodeOutOfRange { id: usize, nodes: usize },

    #[error("sample index {index} out of range for {samples} samples")]
    SampleOutOfRange { index: usize, samples: usize },

    #[error("duplicate sample index {0} in batch")]
    DuplicateSample(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("node {0} has no incident links")]
    IsolatedNode(usize),

    #[error("attack aborted: non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("attack '{attack}' violated its ball/box constraints on {violations} elements")]
    Infeasible { attack: String, violations: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("boundary thickness undefined: no class-crossing pair found in {attempts} attempts")]
    ThicknessUndefined { attempts: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error("run directory is locked by another process: {0}")]
    RunDirLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AtfsError>;
