//! Quality-aware multimodal fusion.
//!
//! Per-modality classifiers are combined at the decision level with weights
//! that are an affine, decreasing function of each modality's per-sample
//! uncertainty (energy score by default). The crate also carries a bench
//! that checks the generalization-bound bookkeeping for two-class linear
//! scorers and the conditions under which dynamic weighting beats static
//! weighting.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fusion;
pub mod io;
pub mod models;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
