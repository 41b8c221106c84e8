//! Desk-scale training laboratory for class-wise self-knowledge distillation
//! (CS-KD) and its companions: a minimal reverse-mode autodiff engine, small
//! reference classifiers, class-paired batch sampling, the CS-KD loss family
//! (plus label smoothing, entropy-penalty, and teacher-distillation
//! baselines), and calibration/retrieval metrics.
//!
//! Start from the runnable examples:
//!
//! ```text
//! cargo run --release --example train_cskd
//! cargo run --release --example compare_ce_cskd
//! cargo run --release --example gradient_check
//! ```
//!
//! or the thin CLI (`cskd train|eval|sweep|gen-data`).

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradGraph, Tensor, Var};
