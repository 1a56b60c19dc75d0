//! Dataset schema, vocabulary, feature ingestion and synthetic data.

pub mod dataset;
pub mod embeddings;
pub mod synth;
pub mod vocab;

pub use dataset::{load_dataset, parse_dataset, BoundarySample, CaptionTriplet, Dataset, DatasetHeader};
pub use synth::{synth_dataset, SynthConfig};
pub use vocab::{CaptionField, Vocabulary};
