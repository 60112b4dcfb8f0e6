//! Joint next-act and next-response prediction for task-oriented dialogue.
//!
//! Three encoders read the act history, the utterance history and the
//! current user turn; a bottleneck autoencoder maps their concatenation
//! into a shared representation that feeds two softmax heads, one over
//! dialogue acts and one over a fixed set of candidate system responses.
//! Both heads train together under a weighted cross-entropy.
//!
//! Everything, including backpropagation, is implemented directly on dense
//! `f64` tensors; see [`numerics::finite_diff_grad`] for the oracle the
//! gradients are checked against.

pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{ParamSet, Rng, Tensor};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{DialogueSession, Speaker, Turn, TurnSample, Vocabularies};
pub use metrics::{BleuOptions, EvalReport};
pub use model::{DialogueContext, Gold, ModelDims, ModelParams, Variant, VariantConfig};
pub use trainer::{TrainConfig, TrainedModel};
