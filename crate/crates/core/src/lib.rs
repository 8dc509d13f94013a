//! Mask-guided attention for language-driven grasp detection on synthetic
//! scenes, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod head;
pub mod json;
pub mod losses;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod test_util;

pub use attention::{mask_guided_forward, AttentionParams, QueryMode, StreamFeatures};
pub use data::{generate_dataset, Dataset, GeneratorConfig, SceneExample, World};
pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::{EvalReport, GraspRect};
pub use head::{fuse_and_score, select_best, GraspHeadParams, GraspPrediction};
pub use losses::LossConfig;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate_model, init_params, train, Checkpoint, Model, TrainConfig};
