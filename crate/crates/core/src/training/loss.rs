use crate::data::vocab::{CaptionField, BOS, EOS};
use crate::data::BoundarySample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::config::check_lambdas;
use crate::model::params::ParamVars;
use crate::model::DualStreamModel;
use crate::tensor::Tensor;

/// `λ1·CE(P_l, y) + λ2·CE(P_g, y)`, each cross-entropy averaged over positions.
pub fn dual_stream_loss_graph(
    g: &mut Graph<'_>,
    p_local: Var,
    p_global: Var,
    targets: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    check_lambdas(lambda1, lambda2)?;
    if g.shape(p_local) != g.shape(p_global) {
        return Err(Error::Dimension {
            op: "dual_stream_loss",
            left: g.shape(p_local).to_vec(),
            right: g.shape(p_global).to_vec(),
        });
    }
    let ce_l = g.cross_entropy(p_local, targets)?;
    let ce_g = g.cross_entropy(p_global, targets)?;
    let a = g.scale(ce_l, lambda1);
    let b = g.scale(ce_g, lambda2);
    g.add(a, b)
}

/// Value-only form of [`dual_stream_loss_graph`].
pub fn dual_stream_loss(
    p_local: &Tensor,
    p_global: &Tensor,
    targets: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(p_local.clone());
    let gl = g.constant(p_global.clone());
    let loss = dual_stream_loss_graph(&mut g, l, gl, targets, lambda1, lambda2)?;
    Ok(g.data(loss)[0])
}

/// Decoder input and next-token targets for one caption:
/// `[BOS, tag, w1..wn]` predicts `[w1..wn, EOS]` from rows `1..=n+1`.
pub fn teacher_forcing_pair(field: CaptionField, caption: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prefix = Vec::with_capacity(caption.len() + 2);
    prefix.push(BOS);
    prefix.push(field.tag());
    prefix.extend_from_slice(caption);
    let mut targets = caption.to_vec();
    targets.push(EOS);
    (prefix, targets)
}

/// Records the teacher-forced loss of one (sample, field) example on `g`.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_loss<'a>(
    model: &'a DualStreamModel,
    g: &mut Graph<'a>,
    pv: &ParamVars,
    sample: &BoundarySample,
    field: CaptionField,
    caption: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let (prefix, targets) = teacher_forcing_pair(field, caption);
    let out = model.forward_graph(g, pv, sample, &prefix)?;
    let n = targets.len();
    let pl = g.slice_rows(out.p_local, 1, n)?;
    let pg = g.slice_rows(out.p_global, 1, n)?;
    dual_stream_loss_graph(g, pl, pg, &targets, lambda1, lambda2)
}

/// Loss value without gradient bookkeeping.
pub fn teacher_forced_loss_value(
    model: &DualStreamModel,
    sample: &BoundarySample,
    field: CaptionField,
    caption: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = model.params.register(&mut g, false);
    let loss = teacher_forced_loss(model, &mut g, &pv, sample, field, caption, lambda1, lambda2)?;
    Ok(g.data(loss)[0])
}
