//! Dense-tensor reverse-mode autodiff and the point-based recalibration network.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use model::{camera_identity_encoding, ParamGroup, ParamStore, PtModel, PtModelConfig};
pub use optim::{clip_gradients, Adam, AdamState, LrMap, OptimizerState, PlateauScheduler};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
