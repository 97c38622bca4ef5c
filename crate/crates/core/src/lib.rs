//! Frequency-forced flow matching.
//!
//! A pixel-space flow-matching model guided by an auxiliary low-frequency
//! stream that matures earlier on its own clock. The crate provides the
//! full stack: a reverse-mode f64 tensor engine, a learnable wavelet packet
//! transform with quadrature-mirror high-pass and soft coefficient gates,
//! the multi-clock interpolation/loss algebra, a multi-stream transformer
//! backbone with block-causal attention, the training pipeline, the
//! multi-clock Euler sampler, and the file formats the CLI speaks.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod image;
pub mod optim;
pub mod param;
pub mod pyramid;
pub mod sampler;
pub mod selftest;
pub mod semantic;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
