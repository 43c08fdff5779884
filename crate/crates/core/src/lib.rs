//! Register-mechanism workbench for a small Vision Transformer.
//!
//! The crate bundles everything needed to train a desk-scale ViT on a
//! synthetic source domain and probe how register tokens (learnable or
//! random) change its transfer behaviour on shifted target domains:
//!
//! - [`tensor`]: a reverse-mode differentiable f64 tensor engine with
//!   exactly the primitives the model needs, plus gradient checking.
//! - [`rng`]: counter-based, bit-reproducible random streams.
//! - [`vit`]: the encoder with attention capture hooks.
//! - [`registers`]: learnable / random register banks, shallow and deep.
//! - [`reap`]: cluster-based patch replacement preprocessing.
//! - [`fewshot`]: episodic n-way k-shot evaluation and register finetuning.
//! - [`analysis`]: attention-sharpness, HSIC/CKA similarity, heatmaps,
//!   and noise-perturbed training baselines.
//! - [`data`]: the synthetic cross-domain suite and its on-disk format.
//! - [`config`] / [`runner`]: the config-driven experiment commands used
//!   by the `reglab` CLI.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fewshot;
pub mod gradcheck;
pub mod optim;
pub mod reap;
pub mod registers;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod util;
pub mod vit;

pub use rng::RngStream;
pub use tensor::{Tensor, TensorError};
