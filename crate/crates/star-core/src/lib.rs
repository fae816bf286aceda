//! Streaming sequence transduction with anchor-compressed representations.
//!
//! The crate implements the full pipeline for stream transduction with
//! dynamic segmentation and compression:
//!
//! - [`autodiff`]: a minimal reverse-mode tape over dense `f64` arrays,
//!   with the Adam optimizer,
//! - [`model`]: a causal transformer encoder/decoder pair whose
//!   cross-attention accepts injected segmenter scores,
//! - [`segmentation`]: segmenter scoring plus the three compression
//!   mechanisms (anchor selection, continuous integrate-and-fire, and
//!   strided convolution),
//! - [`engine`]: the streaming READ/YIELD loop with pluggable policies
//!   and memory/FLOP accounting,
//! - [`metrics`]: WER, DAL, boundary F1, and similarity/ranking metrics,
//! - [`data`]: synthetic frame-stream corpora with ground-truth
//!   segmentation and bit-exact file formats,
//! - [`train`]: staged training, loss assembly, and evaluation modes.
//!
//! The `star` binary exposes data generation, training, evaluation,
//! streaming, rate sweeps, and memory benchmarks on the command line.

pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod segmentation;
pub mod train;

pub use error::{Result, StarError};
