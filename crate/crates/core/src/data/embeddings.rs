//! Optional pretrained word vectors in the whitespace-separated text format
//! (`word v1 v2 ... vd`, one word per line).

use std::collections::HashMap;
use std::path::Path;

use crate::data::vocab::{Vocabulary, RESERVED_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn parse_embeddings(text: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                detail: "non-finite value".into(),
            });
        }
        table.insert(word.to_lowercase(), values);
    }
    Ok(table)
}

pub fn load_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, dim)
}

/// Overwrites rows of a `V × d_emb` token table for every vocabulary word
/// found in `vectors`. Returns how many rows were replaced.
pub fn apply_embeddings(table: &mut Tensor, vocab: &Vocabulary, vectors: &HashMap<String, Vec<f64>>) -> Result<usize> {
    let (rows, dim) = table.dims2()?;
    if rows != vocab.len() {
        return Err(Error::Dimension {
            op: "apply_embeddings",
            left: vec![rows, dim],
            right: vec![vocab.len()],
        });
    }
    let mut replaced = 0;
    for (id, word) in vocab.tokens().iter().enumerate().skip(RESERVED_COUNT) {
        if let Some(v) = vectors.get(word) {
            if v.len() != dim {
                return Err(Error::Dimension {
                    op: "apply_embeddings",
                    left: vec![dim],
                    right: vec![v.len()],
                });
            }
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(v);
            replaced += 1;
        }
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies() {
        let map = parse_embeddings("dog 1 2\nCat 3 4\n\n", 2).unwrap();
        assert_eq!(map["cat"], vec![3.0, 4.0]);
        let mut v = Vocabulary::new();
        v.add("dog");
        v.add("bird");
        let mut t = Tensor::zeros(&[v.len(), 2]).unwrap();
        assert_eq!(apply_embeddings(&mut t, &v, &map).unwrap(), 1);
        assert_eq!(t.row(7), &[1.0, 2.0]);
        assert_eq!(t.row(8), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_width_reports_line() {
        match parse_embeddings("a 1 2\nb 1\n", 2).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        assert!(parse_embeddings("a 1 x\n", 2).is_err());
        assert!(parse_embeddings("a inf 1\n", 2).is_err());
    }
}
