//! Deterministic federated-learning simulator with progressive block-wise
//! training, safe block freezing, analytic memory/compute cost models and
//! community-aware client selection.

pub mod cohort;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod orchestrator;
pub mod pace;
pub mod progressive;
pub mod rng;
pub mod selector;

pub use error::{Error, Result};
