//! JSON Lines dataset files.
//!
//! Line 1 is a [`DatasetHeader`]; every following non-blank line is one
//! boundary sample. Features are row-major nested arrays of floats.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{normalize, CaptionField, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_REGIONS: usize = 10;

fn default_max_regions() -> usize {
    DEFAULT_MAX_REGIONS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub d_app: usize,
    pub d_mot: usize,
    pub d_reg: usize,
    pub d_typ: usize,
    pub boundary_types: Vec<String>,
    #[serde(default = "default_max_regions")]
    pub max_regions: usize,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            d_app: 0,
            d_mot: 0,
            d_reg: 0,
            d_typ: 0,
            boundary_types: Vec::new(),
            max_regions: DEFAULT_MAX_REGIONS,
        }
    }
}

impl DatasetHeader {
    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Parse { line: 1, detail });
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if [self.d_app, self.d_mot, self.d_reg, self.d_typ, self.max_regions].contains(&0) {
            return bad("feature widths and max_regions must be positive".into());
        }
        if self.boundary_types.is_empty() {
            return bad("boundary_types must not be empty".into());
        }
        let unique: HashSet<&String> = self.boundary_types.iter().collect();
        if unique.len() != self.boundary_types.len() {
            return bad("boundary_types contains duplicates".into());
        }
        Ok(())
    }
}

/// Reference captions for one boundary, as normalized word sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTriplet {
    pub subject: Vec<String>,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

impl CaptionTriplet {
    pub fn from_text(subject: &str, before: &str, after: &str) -> Self {
        Self {
            subject: normalize(subject),
            before: normalize(before),
            after: normalize(after),
        }
    }

    pub fn field(&self, field: CaptionField) -> &[String] {
        match field {
            CaptionField::Subject => &self.subject,
            CaptionField::Before => &self.before,
            CaptionField::After => &self.after,
        }
    }

    pub fn encode(&self, field: CaptionField, vocab: &Vocabulary) -> Vec<usize> {
        vocab.encode_words(self.field(field))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySample {
    pub boundary_id: String,
    /// `T_a × d_app` frame features.
    pub appearance: Tensor,
    /// `T_m × d_mot` clip features.
    pub motion: Tensor,
    /// `K × d_reg` detected-region features, `1 ≤ K ≤ max_regions`.
    pub regions: Tensor,
    pub boundary_type_id: usize,
    pub captions: CaptionTriplet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<BoundarySample>,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCaptions {
    pub subject: String,
    pub before: String,
    pub after: String,
}

/// On-disk form of one sample line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub boundary_id: String,
    pub appearance: Vec<Vec<f64>>,
    pub motion: Vec<Vec<f64>>,
    pub regions: Vec<Vec<f64>>,
    pub boundary_type: String,
    pub captions: RawCaptions,
}

fn feature_matrix(id: &str, name: &str, rows: &[Vec<f64>], width: usize, max_rows: usize) -> Result<Tensor> {
    let schema = |detail: String| Error::Schema {
        sample: id.to_string(),
        detail,
    };
    if rows.is_empty() {
        return Err(schema(format!("{name} has no rows")));
    }
    if rows.len() > max_rows {
        return Err(schema(format!(
            "{name} has {} rows, header allows {max_rows}",
            rows.len()
        )));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(schema(format!(
            "{name} row {i} has width {}, header declares {width}",
            r.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(schema(format!("{name} contains non-finite values")));
    }
    Tensor::from_rows(rows)
}

impl SampleRecord {
    fn into_sample(self, header: &DatasetHeader) -> Result<BoundarySample> {
        let id = self.boundary_id.as_str();
        let appearance = feature_matrix(id, "appearance", &self.appearance, header.d_app, usize::MAX)?;
        let motion = feature_matrix(id, "motion", &self.motion, header.d_mot, usize::MAX)?;
        let regions = feature_matrix(id, "regions", &self.regions, header.d_reg, header.max_regions)?;
        let boundary_type_id = header
            .boundary_types
            .iter()
            .position(|t| *t == self.boundary_type)
            .ok_or_else(|| Error::Schema {
                sample: id.to_string(),
                detail: format!("unknown boundary type `{}`", self.boundary_type),
            })?;
        let c = &self.captions;
        let captions = CaptionTriplet::from_text(&c.subject, &c.before, &c.after);
        if let Some(f) = CaptionField::ALL.into_iter().find(|&f| captions.field(f).is_empty()) {
            return Err(Error::Schema {
                sample: id.to_string(),
                detail: format!("{f} caption is empty after tokenization"),
            });
        }
        Ok(BoundarySample {
            boundary_id: self.boundary_id,
            appearance,
            motion,
            regions,
            boundary_type_id,
            captions,
        })
    }
}

/// Parses a whole dataset file. The vocabulary is built from the reference
/// captions in order of first appearance (subject, before, after per line).
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut vocab = Vocabulary::new();
    let Some((hline, htext)) = lines.next() else {
        return Ok(Dataset {
            header: DatasetHeader::default(),
            samples: Vec::new(),
            vocab,
        });
    };
    let header: DatasetHeader = serde_json::from_str(htext).map_err(|e| Error::Parse {
        line: hline,
        detail: format!("bad header: {e}"),
    })?;
    header.validate()?;

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (line, l) in lines {
        let record: SampleRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
            line,
            detail: e.to_string(),
        })?;
        if !seen.insert(record.boundary_id.clone()) {
            return Err(Error::Schema {
                sample: record.boundary_id,
                detail: "duplicate boundary_id".into(),
            });
        }
        let sample = record.into_sample(&header)?;
        for f in CaptionField::ALL {
            for w in sample.captions.field(f) {
                vocab.add(w);
            }
        }
        samples.push(sample);
    }
    Ok(Dataset { header, samples, vocab })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Serializes a header and records into the dataset line format.
pub fn write_dataset(header: &DatasetHeader, records: &[SampleRecord]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
