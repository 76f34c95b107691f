//! Continual-learning benchmark on split and permuted MNIST.
//!
//! Methods: plain fine-tuning, context-dependent gating (XdG), elastic
//! weight consolidation (EWC and its online variant), synaptic intelligence
//! (SI), learning without forgetting (LwF), deep generative replay with hard
//! labels or distillation (DGR, DGR+distill), replay through feedback (RtF),
//! and an offline upper bound. Each can be evaluated in the task-,
//! domain- and class-incremental scenarios.

pub mod data;
mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod regularizers;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
