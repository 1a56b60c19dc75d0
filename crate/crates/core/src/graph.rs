//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it in
//! reverse once, accumulating gradients into every node that requires them.
//!
//! Parameters are registered with [`Graph::param`], which borrows the
//! parameter buffer instead of copying it.

use std::borrow::Cow;
use std::sync::Arc;

use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped below at this value before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    /// Masked entries have output exactly zero, so the backward rule needs no mask.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(x) | Op::Scale(x, _) | Op::Gelu(x) | Op::Sum(x) | Op::Softmax(x) => vec![*x],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

impl Node<'_> {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            &[r, c] => (r, c),
            &[c] => (1, c),
            [] => (1, 1),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tag of the node behind `v`.
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Input nodes of `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are validated on creation")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape {
                shape: other.to_vec(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Registers a borrowed parameter as a leaf without copying it.
    pub fn param(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = transpose_kernel(self.data(x), r, c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![c, r], Cow::Owned(out), rg, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        let (one, n2) = self.dims2(row, "add_row")?;
        if one != 1 || n != n2 {
            return Err(Error::Dimension {
                op: "add_row",
                left: vec![m, n],
                right: vec![one, n2],
            });
        }
        let bias = self.data(row);
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), rg, Op::Scale(x, factor))
    }

    /// Tanh-approximated GELU, applied elementwise.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), rg, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax where masked-out entries receive exactly zero weight.
    ///
    /// Every row must keep at least one unmasked entry.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Some(mask) = &mask {
            if mask.rows() != m || mask.cols() != n {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    left: vec![m, n],
                    right: vec![mask.rows(), mask.cols()],
                });
            }
            mask.check_rows_nonempty("softmax_rows")?;
        }
        let data = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let allowed = |j: usize| mask.as_ref().is_none_or(|mk| mk.allows(i, j));
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if allowed(j) {
                    dst[j] = (row[j] - max).exp();
                    sum += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::Softmax(x)))
    }

    /// Row-wise layer normalization with a `1×n` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.shape(p) != [1, n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (xs, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Stacks matrices with equal column counts in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "empty part list"))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(vec![rows, d], Cow::Owned(out), rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols", "empty part list"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(vec![m, total], Cow::Owned(out), rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::contract(
                "slice_rows",
                format!("rows {start}..{} out of range for {m} rows", start + len),
            ));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![len, n], Cow::Owned(out), rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::contract(
                "slice_cols",
                format!("columns {start}..{} out of range for {n} columns", start + len),
            ));
        }
        let data = self.data(x);
        let out: Vec<f64> = (0..m)
            .flat_map(|i| data[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![m, len], Cow::Owned(out), rg, Op::SliceCols { x, start }))
    }

    /// Embedding lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(
                "gather_rows",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let data = self.data(table);
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| data[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row distributions `probs`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(probs, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::contract(
                "cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let p = self.data(probs);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| p[i * v + y].max(LOG_CLAMP).ln())
            .sum();
        let loss = -total / t as f64;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum::<f64>();
        let rg = self.any_grad(&[x]);
        self.push(Vec::new(), Cow::Owned(vec![s]), rg, Op::Sum(x))
    }

    /// Gradient of the last [`Graph::backward`] target w.r.t. `v`; zeros when
    /// `v` was unreachable or no backward pass has run.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = self
            .grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Tensor::new(node.shape.clone(), data).expect("gradient matches node shape")
    }

    /// Reverse-mode sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Shape {
                shape: n.shape.clone(),
                reason: "backward requires a scalar loss".into(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        if !n.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    contrib(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].dims2();
            let (_, n) = nodes[b.0].dims2();
            accumulate(nodes, grads, *a, |dst| {
                add_into(dst, &matmul_a_bt(g, &nodes[b.0].value, m, n, k));
            });
            accumulate(nodes, grads, *b, |dst| {
                add_into(dst, &matmul_at_b(&nodes[a.0].value, g, m, k, n));
            });
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[x.0].dims2();
            accumulate(nodes, grads, *x, |dst| add_into(dst, &transpose_kernel(g, c, r)));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |dst| add_into(dst, g));
            accumulate(nodes, grads, *b, |dst| add_into(dst, g));
        }
        Op::AddRow(x, row) => {
            let (_, n) = node.dims2();
            accumulate(nodes, grads, *x, |dst| add_into(dst, g));
            accumulate(nodes, grads, *row, |dst| {
                for r in g.chunks_exact(n) {
                    add_into(dst, r);
                }
            });
        }
        Op::Scale(x, f) => {
            accumulate(nodes, grads, *x, |dst| {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += f * s;
                }
            });
        }
        Op::Gelu(x) => {
            let xs = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |dst| {
                for ((d, s), &v) in dst.iter_mut().zip(g).zip(xs.iter()) {
                    *d += s * gelu_grad(v);
                }
            });
        }
        Op::Softmax(x) => {
            let (m, n) = node.dims2();
            let y = &node.value;
            accumulate(nodes, grads, *x, |dst| {
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (m, n) = node.dims2();
            let gamma = &nodes[gain.0].value;
            accumulate(nodes, grads, *gain, |dst| {
                for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dst[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |dst| {
                for gr in g.chunks_exact(n) {
                    add_into(dst, gr);
                }
            });
            accumulate(nodes, grads, *x, |dst| {
                let nf = n as f64;
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<f64> = gr.iter().zip(gamma.iter()).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[r * n + j] += rstd[r] / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                accumulate(nodes, grads, *p, |dst| add_into(dst, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = node.dims2();
            let mut col = 0;
            for p in parts {
                let (_, w) = nodes[p.0].dims2();
                accumulate(nodes, grads, *p, |dst| {
                    for r in 0..m {
                        add_into(&mut dst[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                    }
                });
                col += w;
            }
        }
        Op::SliceRows { x, start } => {
            let (_, n) = node.dims2();
            accumulate(nodes, grads, *x, |dst| {
                add_into(&mut dst[start * n..start * n + g.len()], g);
            });
        }
        Op::SliceCols { x, start } => {
            let (m, len) = node.dims2();
            let (_, n) = nodes[x.0].dims2();
            accumulate(nodes, grads, *x, |dst| {
                for r in 0..m {
                    add_into(&mut dst[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                }
            });
        }
        Op::Gather { table, ids } => {
            let (_, d) = node.dims2();
            accumulate(nodes, grads, *table, |dst| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dst[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::CrossEntropy { probs, targets } => {
            let (t, v) = nodes[probs.0].dims2();
            let p = &nodes[probs.0].value;
            let scale = -g[0] / t as f64;
            accumulate(nodes, grads, *probs, |dst| {
                for (i, &y) in targets.iter().enumerate() {
                    let pv = p[i * v + y];
                    // The clamp is flat below LOG_CLAMP.
                    if pv > LOG_CLAMP {
                        dst[i * v + y] += scale / pv;
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |dst| {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            });
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_kernel(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let m = t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]]);
        let i = g.constant(Tensor::identity(3).unwrap());
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), m);
    }

    #[test]
    fn small_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(t(&[vec![0.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![0.0, 3f64.ln()]]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.data(y);
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_equal_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![2.0; 5]]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.data(y) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![1e308, -1e308, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert!(g.value(y).is_finite());
        assert_eq!(g.data(y)[0], 1.0);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut g = Graph::new();
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let av = g.constant(a.clone());
        let c = g.concat_rows(&[av]).unwrap();
        assert_eq!(g.value(c), a);
    }

    #[test]
    fn concat_rows_orders_and_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 3], 1.0).unwrap(), true);
        let b = g.leaf(Tensor::full(&[3, 3], 2.0).unwrap(), true);
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[5, 3]);
        assert_eq!(&g.data(c)[..6], &[1.0; 6]);
        assert_eq!(&g.data(c)[6..], &[2.0; 9]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), Tensor::full(&[2, 3], 1.0).unwrap());
    }

    #[test]
    fn concat_rows_rejects_column_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(matches!(g.concat_rows(&[a, b]), Err(Error::Dimension { .. })));
        assert!(g.concat_rows(&[]).is_err());
    }

    #[test]
    fn cross_entropy_trivial_values() {
        let mut g = Graph::new();
        let onehot = g.constant(t(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]));
        let l = g.cross_entropy(onehot, &[1, 0]).unwrap();
        assert_eq!(g.data(l)[0], 0.0);

        let uniform = g.constant(Tensor::full(&[3, 4], 0.25).unwrap());
        let l = g.cross_entropy(uniform, &[0, 3, 2]).unwrap();
        assert!((g.data(l)[0] - 4f64.ln()).abs() < 1e-15);
        assert!((g.data(l)[0] - 1.386294).abs() < 1e-6);

        assert!(g.cross_entropy(uniform, &[0, 4, 1]).is_err());
        assert!(g.cross_entropy(uniform, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[vec![1.0, 0.0]]), true);
        let l = g.cross_entropy(p, &[1]).unwrap();
        assert!((g.data(l)[0] + LOG_CLAMP.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        assert!(g.grad(p).is_finite());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), Tensor::full(&[2, 2], 1.0).unwrap());
    }

    #[test]
    fn unreachable_tensor_has_zero_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::full(&[2, 2], 1.5).unwrap(), true);
        let other = g.leaf(Tensor::full(&[3, 1], 2.0).unwrap(), true);
        let _unused = g.scale(other, 2.0);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(other), Tensor::zeros(&[3, 1]).unwrap());
    }

    #[test]
    fn backward_resets_previous_gradients() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::full(&[2, 2], 1.0).unwrap(), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), Tensor::full(&[2, 2], 1.0).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]).unwrap(), true);
        let y = g.scale(w, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 2], 1.0).unwrap(), true);
        let b = g.transpose(a).unwrap();
        let c = g.matmul(a, b).unwrap();
        let d = g.gelu(c);
        let s = g.sum(d);
        for i in 0..g.len() {
            let v = Var(i);
            assert!(g.inputs(v).iter().all(|p| p.index() < i));
        }
        assert_eq!(g.op_tag(s), "sum");
    }
}
