//! Desk-scale anomaly-aware semantic segmentation.
//!
//! The crate is organized around six pieces:
//!
//! - [`gradcore`] — minimal reverse-mode automatic differentiation over dense
//!   `f64` tensors, with gradients for both model parameters and input pixels.
//! - [`segmodel`] — a per-pixel patch classifier with softmax scoring, MSP
//!   anomaly scores, threshold classification, and supervised pre-training.
//! - [`scenes`] — a procedural synthetic corpus generator plus the binary
//!   scene file format and the class-subset partitioner.
//! - [`mgu`] — Masked Gradient Update: turning in-distribution pixels of a
//!   chosen adversarial class into synthetic-unknown auxiliary pixels.
//! - [`aaft`] — anomaly-aware fine-tuning with a KL-to-uniform or
//!   entropy-ratio loss on synthetic-unknown pixels.
//! - [`evalkit`] — AUPR / AUROC / FPR95, threshold sweeps, and the
//!   selection-bias pilot harness.

pub mod aaft;
pub mod evalkit;
pub mod gradcore;
pub mod mgu;
pub mod scenes;
pub mod segmodel;

pub use gradcore::{GradientBundle, Graph, NodeId, Tensor};
pub use scenes::{Role, Scene, ANOMALY_SENTINEL};
pub use segmodel::SegModel;
