//! Skeleton-aware unconditional motion synthesis.
//!
//! A self-contained pipeline: a small reverse-mode autodiff engine, skeletal
//! hierarchy construction, structure-aware neural layers, a style-based
//! generator/discriminator/encoder trio, the full loss suite with lazy
//! regularization, latent-space tooling, encoder-driven applications,
//! evaluation metrics, and BVH import/export — trainable on a procedurally
//! generated motion corpus.

pub mod motion;
pub mod skeleton;
pub mod tensor;

pub use tensor::{Graph, Real, TensorData, TensorError, TensorResult, Var};
