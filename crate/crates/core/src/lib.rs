//! Sparse Mixture of Projectors (SMoP) for multimodal sequence recognition.
//!
//! Audio and video encoder tokens are compressed, routed token-by-token to
//! the top-K of a pool of two-layer MLP expert projectors, and fed as a
//! prefix to a small frozen causal decoder fine-tuned through LoRA
//! adapters. Everything runs on a self-contained f64 autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experts;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod report;
pub mod routing;
pub mod seed;
pub mod smop;
pub mod tensor;

pub use error::{Error, Result};
