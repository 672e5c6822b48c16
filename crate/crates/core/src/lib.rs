//! Bias mitigation for a two-head classifier with attribute-specific
//! adversarial counterfactuals (ASACs).
//!
//! The pipeline has three stages: attack the protected-attribute head to
//! build ASACs, order them by how hard they are for the target head, then
//! fine-tune the target head on that curriculum with a convex mix of clean
//! and adversarial cross-entropy. [`fairness`] audits the result and
//! [`analysis`] provides robustness sweeps and Integrated Gradients.

pub mod analysis;
pub mod attacks;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod fairness;
pub mod finetune;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
