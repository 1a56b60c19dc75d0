//! Dual-stream transformer for generic event boundary captioning.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`attention`]: a small `f64` tensor engine with
//!   reverse-mode autodiff.
//! - [`data`]: dataset files, vocabulary and a synthetic generator.
//! - [`model`]: the local/global stream network and checkpoints.
//! - [`training`], [`decoding`], [`metrics`]: loss and Adam, greedy and
//!   word-level ensemble decoding, ROUGE-L and CIDEr-D.

pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
