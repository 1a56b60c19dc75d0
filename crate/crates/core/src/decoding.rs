//! Greedy and word-level ensemble decoding, plus prediction files.
//!
//! At each step the next token is the argmax over the emittable tokens
//! (`EOS`, `UNK` and words); ties go to the lowest id. Decoding stops on
//! `EOS` or after `max_len` words. The returned ids never include `EOS`.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{CaptionField, BOS, EOS, RESERVED_COUNT, UNK};
use crate::data::{BoundarySample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::DualStreamModel;

/// Anything that yields a next-token distribution for a decoder prefix.
pub trait CaptionModel: Sync {
    fn vocab_size(&self) -> usize;
    /// Longest prefix the model accepts, including `BOS` and the field tag.
    fn max_prefix_len(&self) -> usize;
    fn next_token_probs(&self, sample: &BoundarySample, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl CaptionModel for DualStreamModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_prefix_len(&self) -> usize {
        self.config.max_caption_len
    }

    fn next_token_probs(&self, sample: &BoundarySample, prefix: &[usize]) -> Result<Vec<f64>> {
        let out = self.forward(sample, prefix)?;
        Ok(out.p_fused.row(prefix.len() - 1).to_vec())
    }
}

fn emittable(id: usize) -> bool {
    id == EOS || id == UNK || id >= RESERVED_COUNT
}

fn argmax_where(scores: &[f64], keep: impl Fn(usize) -> bool) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        if s.is_nan() {
            return Err(Error::contract("decode", format!("NaN score for token {i}")));
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Index of the largest score, lowest index on ties. `None` for an empty slice.
pub fn argmax_lowest(scores: &[f64]) -> Result<Option<usize>> {
    argmax_where(scores, |_| true)
}

/// [`argmax_lowest`] restricted to emittable tokens.
pub fn select_token(scores: &[f64]) -> Result<usize> {
    argmax_where(scores, emittable)?.ok_or_else(|| Error::contract("decode", "no emittable token in the vocabulary"))
}

/// Elementwise sum of equal-length distributions, in list order.
pub fn sum_distributions(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let v = dists.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; v];
    for d in dists {
        if d.len() != v {
            return Err(Error::contract("ensemble_decode", "distributions differ in length"));
        }
        for (s, p) in sum.iter_mut().zip(d) {
            *s += p;
        }
    }
    Ok(sum)
}

/// Words that fit after `BOS` and the tag, capped by `max_len`.
fn word_budget(max_len: usize, max_prefix_len: usize) -> usize {
    max_len.min(max_prefix_len.saturating_sub(1))
}

/// Default word budget: one slot short of the longest prefix, so the
/// longest training caption plus `EOS` still fits.
pub fn default_max_len(max_prefix_len: usize) -> usize {
    max_prefix_len.saturating_sub(2)
}

fn decode_with(
    field: CaptionField,
    max_len: usize,
    mut scores: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS, field.tag()];
    while prefix.len() - 2 < max_len {
        let next = select_token(&scores(&prefix)?)?;
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix.split_off(2))
}

pub fn greedy_decode<M: CaptionModel + ?Sized>(
    model: &M,
    sample: &BoundarySample,
    field: CaptionField,
    max_len: usize,
) -> Result<Vec<usize>> {
    let max_len = word_budget(max_len, model.max_prefix_len());
    decode_with(field, max_len, |p| model.next_token_probs(sample, p))
}

/// Sums the members' next-token distributions (no renormalization) and takes
/// the argmax. Members are evaluated concurrently and summed in order.
pub fn ensemble_decode(
    models: &[&dyn CaptionModel],
    sample: &BoundarySample,
    field: CaptionField,
    max_len: usize,
) -> Result<Vec<usize>> {
    let first = models
        .first()
        .ok_or_else(|| Error::contract("ensemble_decode", "no models"))?;
    let v = first.vocab_size();
    if let Some(m) = models.iter().find(|m| m.vocab_size() != v) {
        return Err(Error::contract(
            "ensemble_decode",
            format!("vocabulary sizes differ ({v} vs {})", m.vocab_size()),
        ));
    }
    let limit = models.iter().map(|m| m.max_prefix_len()).min().unwrap_or(0);
    let max_len = word_budget(max_len, limit);
    decode_with(field, max_len, |prefix| {
        let dists = models
            .par_iter()
            .map(|m| m.next_token_probs(sample, prefix))
            .collect::<Result<Vec<_>>>()?;
        let sum = sum_distributions(&dists)?;
        if sum.len() != v {
            return Err(Error::contract(
                "ensemble_decode",
                "member returned a wrong-length distribution",
            ));
        }
        Ok(sum)
    })
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub boundary_id: String,
    pub subject: String,
    pub before: String,
    pub after: String,
}

impl PredictionRecord {
    pub fn field(&self, field: CaptionField) -> &str {
        match field {
            CaptionField::Subject => &self.subject,
            CaptionField::Before => &self.before,
            CaptionField::After => &self.after,
        }
    }
}

/// Decodes all three fields of every sample. A single model decodes
/// greedily, several decode as an ensemble.
pub fn predict(
    models: &[&dyn CaptionModel],
    vocab: &Vocabulary,
    samples: &[BoundarySample],
    max_len: usize,
) -> Result<Vec<PredictionRecord>> {
    if models.iter().any(|m| m.vocab_size() != vocab.len()) {
        return Err(Error::contract(
            "predict",
            "model vocabulary size does not match the vocabulary",
        ));
    }
    let decode = |s: &BoundarySample, f: CaptionField| -> Result<String> {
        let ids = match models {
            [one] => greedy_decode(*one, s, f, max_len),
            _ => ensemble_decode(models, s, f, max_len),
        }?;
        Ok(vocab.detokenize(&ids))
    };
    samples
        .iter()
        .map(|s| {
            Ok(PredictionRecord {
                boundary_id: s.boundary_id.clone(),
                subject: decode(s, CaptionField::Subject)?,
                before: decode(s, CaptionField::Before)?,
                after: decode(s, CaptionField::After)?,
            })
        })
        .collect()
}

pub fn write_predictions(records: &[PredictionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a prediction JSONL file; blank lines are skipped and ids must be unique.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if !seen.insert(r.boundary_id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("duplicate boundary_id `{}`", r.boundary_id),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    parse_predictions(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CaptionTriplet;
    use crate::tensor::Tensor;

    struct Table {
        v: usize,
        rows: Vec<Vec<f64>>,
    }

    impl CaptionModel for Table {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn max_prefix_len(&self) -> usize {
            8
        }
        fn next_token_probs(&self, _: &BoundarySample, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.rows[(prefix.len() - 2).min(self.rows.len() - 1)].clone())
        }
    }

    fn sample() -> BoundarySample {
        BoundarySample {
            boundary_id: "x".into(),
            appearance: Tensor::zeros(&[1, 1]).unwrap(),
            motion: Tensor::zeros(&[1, 1]).unwrap(),
            regions: Tensor::zeros(&[1, 1]).unwrap(),
            boundary_type_id: 0,
            captions: CaptionTriplet::from_text("a", "b", "c"),
        }
    }

    fn onehot(v: usize, i: usize) -> Vec<f64> {
        let mut r = vec![0.0; v];
        r[i] = 1.0;
        r
    }

    #[test]
    fn stops_at_eos_and_respects_max_len() {
        let m = Table {
            v: 9,
            rows: vec![onehot(9, 7), onehot(9, 8), onehot(9, EOS)],
        };
        assert_eq!(
            greedy_decode(&m, &sample(), CaptionField::Subject, 10).unwrap(),
            vec![7, 8]
        );
        assert_eq!(greedy_decode(&m, &sample(), CaptionField::Subject, 1).unwrap(), vec![7]);
        assert!(greedy_decode(&m, &sample(), CaptionField::Subject, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn eos_first_gives_empty_caption() {
        let m = Table {
            v: 9,
            rows: vec![onehot(9, EOS)],
        };
        assert!(greedy_decode(&m, &sample(), CaptionField::After, 5).unwrap().is_empty());
    }

    #[test]
    fn ties_break_to_lowest_id_and_control_tokens_are_skipped() {
        let mut row = vec![0.1; 10];
        row[BOS] = 0.9;
        row[CaptionField::Before.tag()] = 0.9;
        row[8] = 0.3;
        row[9] = 0.3;
        assert_eq!(select_token(&row).unwrap(), 8);
        assert_eq!(select_token(&[0.5, 0.5, 0.0, 0.0]).unwrap(), EOS);
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.0]).unwrap(), Some(0));
        assert_eq!(argmax_lowest(&[]).unwrap(), None);
        assert!(select_token(&[0.1, 0.2, f64::NAN]).is_err());
    }

    #[test]
    fn summed_vectors_pick_largest() {
        let sum = sum_distributions(&[vec![0.6, 0.3, 0.1], vec![0.1, 0.6, 0.3]]).unwrap();
        assert_eq!(argmax_lowest(&sum).unwrap(), Some(1));
        for (a, b) in sum.iter().zip([0.7, 0.9, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
        // The same vectors placed on word ids, through the decoder.
        let place = |v: [f64; 3]| {
            let mut r = vec![0.0; 10];
            r[7..].copy_from_slice(&v);
            r
        };
        let a = Table {
            v: 10,
            rows: vec![place([0.6, 0.3, 0.1])],
        };
        let b = Table {
            v: 10,
            rows: vec![place([0.1, 0.6, 0.3])],
        };
        assert_eq!(
            ensemble_decode(&[&a, &b], &sample(), CaptionField::Subject, 1).unwrap(),
            vec![8]
        );
    }

    #[test]
    fn output_is_capped_by_model_length() {
        let m = Table {
            v: 9,
            rows: vec![onehot(9, 7)],
        };
        assert_eq!(
            greedy_decode(&m, &sample(), CaptionField::Subject, 100).unwrap().len(),
            7
        );
    }

    #[test]
    fn ensemble_rejects_vocab_mismatch_and_empty_list() {
        let a = Table {
            v: 9,
            rows: vec![onehot(9, 7)],
        };
        let b = Table {
            v: 10,
            rows: vec![onehot(10, 7)],
        };
        assert!(ensemble_decode(&[&a, &b], &sample(), CaptionField::Subject, 3).is_err());
        assert!(ensemble_decode(&[], &sample(), CaptionField::Subject, 3).is_err());
    }

    #[test]
    fn prediction_lines_round_trip() {
        let recs = vec![PredictionRecord {
            boundary_id: "b1".into(),
            subject: "a man".into(),
            before: "".into(),
            after: "he runs".into(),
        }];
        assert_eq!(parse_predictions(&write_predictions(&recs).unwrap()).unwrap(), recs);
        let dup = "{\"boundary_id\":\"x\",\"subject\":\"\",\"before\":\"\",\"after\":\"\"}\n".repeat(2);
        assert!(matches!(parse_predictions(&dup), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_predictions("\n{"), Err(Error::Parse { line: 2, .. })));
    }
}
