//! Frozen-ViT deepfake detector with dual-level adapters.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] / [`graph`]: a minimal deterministic reverse-mode autodiff
//!   engine (f32 for training, f64 for gradient checking);
//! - [`vit`], [`gba`], [`lsa`]: the frozen transformer backbone, the
//!   bottleneck adapters beside each MLP, and the convolutional spatial
//!   adapter with its cross-attention interactions;
//! - [`model`]: stage assembly, freeze policies, parameter accounting and
//!   checkpoint I/O;
//! - [`training`], [`synth`]: SGD with warmup+cosine schedule and the
//!   synthetic forgery-artifact dataset generator;
//! - [`evaluation`], [`corrupt`]: ACC/AUC/EER metrics, saliency and
//!   embedding export, and low-level corruption kernels;
//! - [`gradcheck`]: the f64 finite-difference verification suite.

pub mod checkpoint;
pub mod config;
pub mod corrupt;
pub mod error;
pub mod evaluation;
pub mod gba;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod lsa;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vit;

pub use config::{FreezePolicy, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use model::Model;
pub use tensor::{Dtype, Scalar, Tensor};
