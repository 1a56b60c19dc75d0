//! The dual-stream captioning network and its checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;
pub mod streams;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Profile};
pub use network::{DualStreamModel, ForwardOutput, ForwardVars};
pub use params::{ModelParams, ParamId, ParamStore};
