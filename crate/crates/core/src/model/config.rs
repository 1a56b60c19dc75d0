use serde::{Deserialize, Serialize};

use crate::data::DatasetHeader;
use crate::error::{Error, Result};

/// Architectural presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published configuration: 3 layers, width 768, 12 heads.
    Paper,
    /// Small configuration used for tests and overfitting runs.
    Desk,
}

/// Upper bound on any single configured extent.
pub const MAX_EXTENT: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub d_app: usize,
    pub d_mot: usize,
    pub d_reg: usize,
    pub d_typ: usize,
    pub vocab_size: usize,
    pub num_boundary_types: usize,
    /// Longest appearance or motion sequence (size of the temporal position table).
    pub max_frames: usize,
    /// Region rows after zero padding.
    pub max_regions: usize,
    /// Longest decoder prefix, including the start and field-tag tokens.
    pub max_caption_len: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ModelConfig {
    /// Architecture of `profile` with input widths taken from a dataset header.
    pub fn for_dataset(profile: Profile, header: &DatasetHeader, vocab_size: usize) -> Self {
        let (layers, d, heads, d_emb, max_frames, max_caption_len) = match profile {
            Profile::Paper => (3, 768, 12, 300, 64, 32),
            Profile::Desk => (2, 32, 4, 32, 16, 8),
        };
        Self {
            layers,
            d,
            heads,
            d_emb,
            d_app: header.d_app,
            d_mot: header.d_mot,
            d_reg: header.d_reg,
            d_typ: header.d_typ,
            vocab_size,
            num_boundary_types: header.boundary_types.len(),
            max_frames,
            max_regions: header.max_regions,
            max_caption_len,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("d_emb", self.d_emb),
            ("d_app", self.d_app),
            ("d_mot", self.d_mot),
            ("d_reg", self.d_reg),
            ("d_typ", self.d_typ),
            ("vocab_size", self.vocab_size),
            ("num_boundary_types", self.num_boundary_types),
            ("max_frames", self.max_frames),
            ("max_regions", self.max_regions),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if let Some((name, v)) = widths
            .iter()
            .chain(&[("max_caption_len", self.max_caption_len)])
            .find(|(_, v)| *v > MAX_EXTENT)
        {
            return Err(Error::Config(format!("{name}={v} exceeds {MAX_EXTENT}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.max_caption_len < 3 {
            return Err(Error::Config("max_caption_len must leave room for one word".into()));
        }
        if self.vocab_size <= crate::data::vocab::RESERVED_COUNT {
            return Err(Error::Config("vocab_size must exceed the reserved tokens".into()));
        }
        check_lambdas(self.lambda1, self.lambda2)
    }
}

pub(crate) fn check_lambdas(l1: f64, l2: f64) -> Result<()> {
    if !(l1.is_finite() && l2.is_finite() && l1 >= 0.0 && l2 >= 0.0 && l1 + l2 > 0.0) {
        return Err(Error::Config(format!(
            "stream weights must be finite, nonnegative and not both zero (got {l1}, {l2})"
        )));
    }
    Ok(())
}
