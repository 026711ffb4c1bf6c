//! Meta adversarial perturbations at desk scale.
//!
//! A meta adversarial perturbation (MAP) is a single image-agnostic
//! perturbation trained so that one gradient-ascent step adapts it into a
//! strong per-image attack. This crate provides everything needed to compute
//! and evaluate such perturbations against FGSM and UAP baselines on small
//! classifiers:
//!
//! - [`autodiff`] — reverse-mode differentiation over tensors, with nested
//!   (second-order) gradients for the meta-objective,
//! - [`models`] — a small MLP/CNN zoo with SGD training and checkpointing,
//! - [`data`] — IDX / CIFAR-10 loaders, balanced subsets, and a deterministic
//!   synthetic digit corpus for hermetic runs,
//! - [`attacks`] — FGSM, iterated projected attacks, the UAP baseline, and
//!   MAP meta-training,
//! - [`eval`] — accuracy-under-attack, transfer matrices, ablation sweeps,
//!   and CSV/markdown/SVG report emission.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
