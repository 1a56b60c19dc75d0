use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const CIDER_MAX_N: usize = 4;
/// Standard deviation of the length penalty, in tokens.
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Ordered maps keep every floating-point sum in a fixed order.
type Counts<'a> = BTreeMap<&'a [String], f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = Counts::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *c.entry(g).or_insert(0.0) += 1.0;
        }
    }
    c
}

struct Weighted<'a> {
    vec: BTreeMap<&'a [String], f64>,
    norm: f64,
}

fn weigh<'a>(counts: &Counts<'a>, df: &BTreeMap<&[String], usize>, log_n: f64) -> Weighted<'a> {
    let vec: BTreeMap<&'a [String], f64> = counts
        .iter()
        .map(|(&g, &tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, tf * (log_n - d.ln()))
        })
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    Weighted { vec, norm }
}

/// Clipped cosine: `Σ min(h, r)·r / (|h|·|r|)` over the candidate's n-grams.
fn clipped_cosine(h: &Weighted<'_>, r: &Weighted<'_>) -> f64 {
    if h.norm == 0.0 || r.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = h
        .vec
        .iter()
        .filter_map(|(g, &vh)| r.vec.get(g).map(|&vr| vh.min(vr) * vr))
        .sum();
    (dot / (h.norm * r.norm)).min(1.0)
}

/// CIDEr-D of every candidate against its own references. Document
/// frequencies count, for each n-gram, the samples whose reference set
/// contains it.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<CiderScores> {
    if candidates.is_empty() {
        return Err(Error::Evaluation("CIDEr-D needs a nonempty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Evaluation(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let log_n = (candidates.len() as f64).ln();
    let mut per_sample = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for refs in references {
            let grams: BTreeSet<&[String]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            if refs.is_empty() {
                continue;
            }
            let h = weigh(&ngram_counts(cand, n), &df, log_n);
            let mut total = 0.0;
            for r in refs {
                let rw = weigh(&ngram_counts(r, n), &df, log_n);
                let delta = cand.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                total += clipped_cosine(&h, &rw) * penalty;
            }
            per_sample[i] += total / refs.len() as f64;
        }
    }
    for s in &mut per_sample {
        *s = *s / CIDER_MAX_N as f64 * CIDER_SCALE;
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderScores { per_sample, mean })
}
