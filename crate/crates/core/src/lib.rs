//! Few-shot graph classification: prototypical networks over a GIN
//! embedder, with task-adaptive conditioning and latent MixUp.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod embedder;
pub mod episodes;
pub mod eval;
pub mod error;
pub mod graph;
pub mod mixup;
pub mod model;
pub mod parallel;
pub mod proto;
pub mod rng;
pub mod tae;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
