use thiserror::Error;

/// Errors raised across the recalibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),

    #[error("look-at is degenerate: {0}")]
    DegenerateLookAt(&'static str),

    #[error("synthesis stalled: {accepted} of {requested} samples after {attempts} attempts")]
    SynthesisStalled {
        requested: usize,
        accepted: usize,
        attempts: usize,
    },

    #[error("bad object file: {0}")]
    BadObjectFile(String),

    #[error("bad rig file: {0}")]
    BadRigFile(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("computation graph references a later node ({node} -> {input})")]
    GraphCycle { node: usize, input: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("non-finite loss at epoch {epoch} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { epoch: usize, batch_seed: u64 },

    #[error("singular normal equations at camera {camera}, parameter {parameter}")]
    SingularNormalEquations { camera: usize, parameter: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown recalibrator '{0}'")]
    UnknownRecalibrator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
