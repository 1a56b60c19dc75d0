use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{normalize, CaptionField};
use crate::data::Dataset;
use crate::decoding::PredictionRecord;
use crate::error::{Error, Result};
use crate::metrics::cider::cider_d;
use crate::metrics::rouge::rouge_l;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceCaptions {
    pub subject: Vec<String>,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

impl ReferenceCaptions {
    pub fn field(&self, field: CaptionField) -> &[String] {
        match field {
            CaptionField::Subject => &self.subject,
            CaptionField::Before => &self.before,
            CaptionField::After => &self.after,
        }
    }
}

/// One line of a reference file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRecord {
    pub boundary_id: String,
    pub captions: ReferenceCaptions,
}

/// Parses a reference JSONL file. Every field needs at least one caption.
pub fn parse_references(text: &str) -> Result<Vec<ReferenceRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse { line: i + 1, detail };
        let r: ReferenceRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(f) = CaptionField::ALL.into_iter().find(|&f| r.captions.field(f).is_empty()) {
            return Err(err(format!("`{}` has no {f} reference", r.boundary_id)));
        }
        if !seen.insert(r.boundary_id.clone()) {
            return Err(err(format!("duplicate boundary_id `{}`", r.boundary_id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_references(path: impl AsRef<Path>) -> Result<Vec<ReferenceRecord>> {
    let path = path.as_ref();
    parse_references(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Single-reference records built from a dataset's own captions.
pub fn references_from_dataset(ds: &Dataset) -> Vec<ReferenceRecord> {
    ds.samples
        .iter()
        .map(|s| ReferenceRecord {
            boundary_id: s.boundary_id.clone(),
            captions: ReferenceCaptions {
                subject: vec![s.captions.subject.join(" ")],
                before: vec![s.captions.before.join(" ")],
                after: vec![s.captions.after.join(" ")],
            },
        })
        .collect()
}

pub fn write_references(records: &[ReferenceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Scores for the three fields and their arithmetic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldScores {
    pub subject: f64,
    pub before: f64,
    pub after: f64,
    pub average: f64,
}

impl FieldScores {
    pub fn new(subject: f64, before: f64, after: f64) -> Self {
        Self {
            subject,
            before,
            after,
            average: (subject + before + after) / 3.0,
        }
    }

    pub fn field(&self, field: CaptionField) -> f64 {
        match field {
            CaptionField::Subject => self.subject,
            CaptionField::Before => self.before,
            CaptionField::After => self.after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub boundary_id: String,
    pub rouge_l: FieldScores,
    pub cider_d: FieldScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_size: usize,
    /// ROUGE-L in [0, 1]; `average` is the mean over fields.
    pub rouge_l: FieldScores,
    /// CIDEr-D in [0, 10]; `average` is the mean over fields.
    pub cider_d: FieldScores,
    /// The other grouping: per field, the mean of ROUGE-L and CIDEr-D after
    /// both are multiplied by 100 (the usual table convention). `average`
    /// is then the mean over fields, equal to the mean of the two metric
    /// averages.
    pub mean_over_metrics_x100: FieldScores,
    pub per_sample: Vec<SampleScores>,
}

fn tokens(s: &str) -> Vec<String> {
    normalize(s)
}

/// Scores each field of the predictions as its own corpus, in reference order.
pub fn triplet_average(predictions: &[PredictionRecord], references: &[ReferenceRecord]) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(Error::Evaluation("no references".into()));
    }
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.boundary_id.as_str(), p)).collect();
    if by_id.len() != predictions.len() {
        return Err(Error::Evaluation("duplicate prediction ids".into()));
    }
    let ref_ids: HashSet<&str> = references.iter().map(|r| r.boundary_id.as_str()).collect();
    let unknown: Vec<&str> = predictions
        .iter()
        .map(|p| p.boundary_id.as_str())
        .filter(|id| !ref_ids.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Evaluation(format!(
            "predictions without references: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<&str> = references
        .iter()
        .map(|r| r.boundary_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions for: {}",
            missing.join(", ")
        )));
    }

    let n = references.len();
    let mut rouge = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut cider = [vec![], vec![], vec![]];
    for field in CaptionField::ALL {
        let cands: Vec<Vec<String>> = references
            .iter()
            .map(|r| tokens(by_id[r.boundary_id.as_str()].field(field)))
            .collect();
        let refs: Vec<Vec<Vec<String>>> = references
            .iter()
            .map(|r| r.captions.field(field).iter().map(|s| tokens(s)).collect())
            .collect();
        for (i, (c, rs)) in cands.iter().zip(&refs).enumerate() {
            rouge[field.index()][i] = rouge_l(c, rs);
        }
        cider[field.index()] = cider_d(&cands, &refs)?.per_sample;
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rouge_l = FieldScores::new(mean(&rouge[0]), mean(&rouge[1]), mean(&rouge[2]));
    let cider_d = FieldScores::new(mean(&cider[0]), mean(&cider[1]), mean(&cider[2]));
    let both = |f: CaptionField| 100.0 * (rouge_l.field(f) + cider_d.field(f)) / 2.0;
    let mean_over_metrics_x100 = FieldScores::new(
        both(CaptionField::Subject),
        both(CaptionField::Before),
        both(CaptionField::After),
    );
    let per_sample = references
        .iter()
        .enumerate()
        .map(|(i, r)| SampleScores {
            boundary_id: r.boundary_id.clone(),
            rouge_l: FieldScores::new(rouge[0][i], rouge[1][i], rouge[2][i]),
            cider_d: FieldScores::new(cider[0][i], cider[1][i], cider[2][i]),
        })
        .collect();
    Ok(EvalReport {
        corpus_size: n,
        rouge_l,
        cider_d,
        mean_over_metrics_x100,
        per_sample,
    })
}
