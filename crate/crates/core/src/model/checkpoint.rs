//! Checkpoint files: one line of JSON header, then raw little-endian `f64`
//! parameter buffers in manifest order.
//!
//! ```text
//! {"schema_version":1,"config":{..},"vocabulary":[..],"boundary_types":[..],"parameters":[{"name":..,"shape":[r,c],"offset":0},..]}\n
//! <r·c·8 bytes> <r·c·8 bytes> ...
//! ```
//!
//! Offsets are byte offsets from the first byte after the newline and must
//! be contiguous.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::DualStreamModel;
use crate::model::params::{plan, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    vocabulary: Vec<String>,
    boundary_types: Vec<String>,
    parameters: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualStreamModel,
    pub vocabulary: Vocabulary,
    pub boundary_types: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parameter tensors in a model with `layers` layers.
fn expected_param_count(layers: usize) -> Option<usize> {
    // 5 projections × (weight, bias) + 4 tables + 2 heads × (weight, bias),
    // and 20 tensors per stream per layer.
    layers.checked_mul(40)?.checked_add(18)
}

impl Checkpoint {
    pub fn new(model: DualStreamModel, vocabulary: Vocabulary, boundary_types: Vec<String>) -> Result<Self> {
        let c = &model.config;
        if vocabulary.len() != c.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens, config expects {}",
                vocabulary.len(),
                c.vocab_size
            )));
        }
        if boundary_types.len() != c.num_boundary_types {
            return Err(bad(format!(
                "{} boundary types, config expects {}",
                boundary_types.len(),
                c.num_boundary_types
            )));
        }
        Ok(Self {
            model,
            vocabulary,
            boundary_types,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let parameters = self
            .model
            .params
            .store
            .iter()
            .map(|p| {
                let (r, c) = p.value.dims2()?;
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: [r, c],
                    offset,
                };
                offset += r * c * 8;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            schema_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            vocabulary: self.vocabulary.tokens().to_vec(),
            boundary_types: self.boundary_types.clone(),
            parameters,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for p in self.model.params.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a checkpoint. Nothing proportional to the
    /// declared parameter sizes is allocated before the sizes are checked
    /// against the actual payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header terminator"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[nl + 1..];
        if header.schema_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported schema_version {}", header.schema_version)));
        }
        let config = header.config;
        config.validate()?;
        let vocabulary = Vocabulary::from_tokens(header.vocabulary)?;
        if expected_param_count(config.layers) != Some(header.parameters.len()) {
            return Err(bad(format!(
                "{} manifest entries do not match {} layers",
                header.parameters.len(),
                config.layers
            )));
        }

        let mut expected_offset = 0usize;
        for e in &header.parameters {
            if e.offset != expected_offset {
                return Err(bad(format!(
                    "parameter `{}` has non-contiguous offset {}",
                    e.name, e.offset
                )));
            }
            let bytes = e.shape[0]
                .checked_mul(e.shape[1])
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad(format!("parameter `{}` is too large", e.name)))?;
            expected_offset = expected_offset
                .checked_add(bytes)
                .ok_or_else(|| bad("payload size overflows"))?;
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "manifest describes {expected_offset} payload bytes, file has {}",
                payload.len()
            )));
        }
        let (_, specs) = plan(&config);
        if let Some((e, s)) = header
            .parameters
            .iter()
            .zip(&specs)
            .find(|(e, s)| e.name != s.name || e.shape != s.shape)
        {
            return Err(bad(format!(
                "manifest entry `{}` {:?} does not match expected `{}` {:?}",
                e.name, e.shape, s.name, s.shape
            )));
        }

        let named = header
            .parameters
            .into_iter()
            .map(|e| {
                let n = e.shape[0] * e.shape[1];
                let raw = &payload[e.offset..e.offset + n * 8];
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("parameter `{}` contains non-finite values", e.name)));
                }
                Ok((e.name, Tensor::new(e.shape.to_vec(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_named(&config, named)?;
        Self::new(DualStreamModel { config, params }, vocabulary, header.boundary_types)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
