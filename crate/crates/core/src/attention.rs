//! Scaled dot-product attention and attention masks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Boolean `rows × cols` mask; `true` marks a key a query may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(allowed.len()) {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![rows, cols],
                right: vec![allowed.len()],
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub(crate) fn check_rows_nonempty(&self, op: &'static str) -> Result<()> {
        match (0..self.rows).find(|&i| !(0..self.cols).any(|j| self.allows(i, j))) {
            Some(i) => Err(Error::contract(op, format!("query row {i} has every key masked"))),
            None => Ok(()),
        }
    }
}

/// `softmax(Q Kᵀ / √dₕ) V`, with masked scores excluded from the softmax.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
    attention_with_weights(g, q, k, v, mask).map(|(out, _)| out)
}

/// Like [`scaled_dot_attention`] but also returns the `q×k` weight matrix.
pub fn attention_with_weights(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Mask>>,
) -> Result<(Var, Var)> {
    let (dq, dk, dv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if dq.len() != 2 || dk.len() != 2 || dv.len() != 2 || dq[1] != dk[1] {
        return Err(Error::Dimension {
            op: "attention(q, k)",
            left: dq,
            right: dk,
        });
    }
    if dk[0] != dv[0] {
        return Err(Error::Dimension {
            op: "attention(k, v)",
            left: dk,
            right: dv,
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dq[1] as f64).sqrt());
    let weights = g.softmax_rows_masked(scaled, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.4], vec![5.0, 1.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![0.7, 0.1]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![3.0, -1.5]]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for r in 0..3 {
            assert_eq!(&g.data(out)[r * 2..r * 2 + 2], &[3.0, -1.5]);
        }
    }

    #[test]
    fn zero_query_averages_unmasked_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 9.0]]).unwrap());
        let mask = Arc::new(Mask::from_fn(2, 3, |i, j| i == 1 || j != 2));
        let (out, w) = attention_with_weights(&mut g, q, k, v, Some(mask)).unwrap();
        let o = g.data(out);
        assert!((o[0] - 1.5).abs() < 1e-15 && (o[1] - 1.5).abs() < 1e-15);
        assert!((o[2] - 3.0).abs() < 1e-15 && (o[3] - 4.0).abs() < 1e-15);
        assert_eq!(g.data(w)[2], 0.0);
    }

    #[test]
    fn fully_masked_row_is_a_contract_violation() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let k = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let mask = Arc::new(Mask::from_fn(2, 2, |i, _| i == 0));
        let err = scaled_dot_attention(&mut g, q, k, k, Some(mask)).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "{err}");
    }

    #[test]
    fn head_dim_mismatch_is_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let k = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        assert!(scaled_dot_attention(&mut g, q, k, k, None).is_err());
    }
}
