//! Adversarial contrastive finetuning for small dual-encoder (image/text)
//! models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and reverse-mode differentiation.
//! * [`encoders`]: vision and text encoders, tokenizer, checkpoints.
//! * [`objectives`]: contrastive loss, zero-shot cross-entropy and the
//!   logit/feature regularizers.
//! * [`attacks`]: L∞ PGD with cross-entropy, contrastive, CW-margin and
//!   embedding-distance objectives.
//! * [`finetune`]: optimizer, schedules, training steps for every method and
//!   the epoch loop with early stopping.
//! * [`data`]: shards, manifests, labeled datasets, synthetic data, batching.
//! * [`eval`]: zero-shot clean/robust evaluation and cosine deviation.
//!
//! All numeric code is generic over [`Scalar`] (`f64` or `f32`); the aliases
//! below fix the default 64-bit precision.

pub mod attacks;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod objectives;
pub mod scalar;
pub mod tensor;

#[cfg(test)]
mod test_support;

pub use attacks::AttackConfig;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use finetune::{Method, TrainConfig};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type ModelState = encoders::ModelState<f64>;
pub type Params = encoders::Params<f64>;
pub type PerturbationBatch = attacks::PerturbationBatch<f64>;
pub type TrainerState = finetune::TrainerState<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type ModelState32 = encoders::ModelState<f32>;
