//! Cross-modality attention fusion for multi-task image-text
//! classification, built on a small reverse-mode autodiff core.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod heatmap;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod pretrain;
pub mod records;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use data::{Dataset, ExamplePair, SynthConfig};
pub use eval::{AblationReport, EvalReport};
pub use fusion::{FusionVariant, TaskSpec};
pub use model::{FusionModel, ModelConfig};
pub use training::{Checkpoint, Stage, TrainConfig, TrainReport};
