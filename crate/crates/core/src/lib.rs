//! Few-shot out-of-distribution detection with a learned low-confidence
//! boundary: a small reverse-mode autodiff engine, MLP classifier and
//! generator, the training losses, robustness metrics and an experiment
//! harness.

pub mod audit;
pub mod config;
pub mod datasets;
pub mod error;
pub mod grad;
pub mod harness;
pub mod losses;
pub mod models;
pub mod rng;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
