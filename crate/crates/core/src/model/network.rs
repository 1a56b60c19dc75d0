//! Forward pass of the dual-stream network.
//!
//! Five inputs are projected to width `d`: appearance, motion and region
//! features, the boundary-type embedding and the caption prefix. The local
//! stream is `[regions, type, caption]`, the global stream is
//! `[appearance, motion, type, caption]`. Each layer runs per-stream masked
//! self-attention, then cross-attention where each stream queries the other
//! stream's feature rows, then a feed-forward block; every sublayer is
//! residual and post-normalized. Caption rows of each stream feed that
//! stream's vocabulary head.

use std::sync::Arc;

use crate::attention::{attention_with_weights, Mask};
use crate::data::vocab::{CaptionField, BOS};
use crate::data::BoundarySample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::config::ModelConfig;
use crate::model::params::{
    AttentionParams, FeedForwardParams, LayerParams, Linear, ModelParams, NormParams, ParamVars, StreamLayerParams,
};
use crate::model::streams::{Segment, StreamLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Handle to one head's attention weights, kept so callers can inspect them.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub layer: usize,
    pub stream: StreamKind,
    pub kind: AttentionKind,
    pub head: usize,
    pub weights: Var,
    pub mask: Arc<Mask>,
}

/// The five projected input sequences, each of width `d`.
#[derive(Debug, Clone)]
pub struct Projected {
    pub appearance: Var,
    pub motion: Var,
    pub regions: Var,
    pub boundary_type: Var,
    pub caption: Var,
    /// Validity of each (padded) region row.
    pub region_valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Streams {
    pub local: Var,
    pub global: Var,
    pub local_layout: StreamLayout,
    pub global_layout: StreamLayout,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub p_local: Var,
    pub p_global: Var,
    pub p_fused: Var,
    pub attention: Vec<AttentionProbe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub p_local: Tensor,
    pub p_global: Tensor,
    pub p_fused: Tensor,
}

fn linear(g: &mut Graph<'_>, pv: &ParamVars, lin: &Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, pv[lin.weight])?;
    g.add_row(y, pv[lin.bias])
}

fn width_check(name: &'static str, t: &Tensor, width: usize) -> Result<()> {
    if t.cols() != width || t.rank() != 2 {
        return Err(Error::Dimension {
            op: name,
            left: t.shape().to_vec(),
            right: vec![width],
        });
    }
    Ok(())
}

/// Projects every modality to width `d`. Temporal positions are added to
/// appearance and motion rows, caption positions to caption rows; regions
/// and the type row carry no position. Regions are zero-padded to
/// `max_regions` rows.
pub fn project_features(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    params: &ModelParams,
    config: &ModelConfig,
    sample: &BoundarySample,
    prefix: &[usize],
) -> Result<Projected> {
    let lay = &params.layout;
    width_check("project_features(appearance)", &sample.appearance, config.d_app)?;
    width_check("project_features(motion)", &sample.motion, config.d_mot)?;
    width_check("project_features(regions)", &sample.regions, config.d_reg)?;
    let (t_a, t_m, k) = (sample.appearance.rows(), sample.motion.rows(), sample.regions.rows());
    if t_a > config.max_frames || t_m > config.max_frames {
        return Err(Error::contract(
            "project_features",
            format!(
                "{t_a} appearance / {t_m} motion rows exceed max_frames={}",
                config.max_frames
            ),
        ));
    }
    if k > config.max_regions {
        return Err(Error::contract(
            "project_features",
            format!("{k} region rows exceed max_regions={}", config.max_regions),
        ));
    }
    if sample.boundary_type_id >= config.num_boundary_types {
        return Err(Error::contract(
            "project_features",
            format!("boundary type {} out of range", sample.boundary_type_id),
        ));
    }
    if prefix.is_empty() || prefix.len() > config.max_caption_len {
        return Err(Error::contract(
            "project_features",
            format!("prefix length {} not in 1..={}", prefix.len(), config.max_caption_len),
        ));
    }

    let app = g.constant(sample.appearance.clone());
    let app = linear(g, pv, &lay.proj_app, app)?;
    let pos_a = g.slice_rows(pv[lay.pos_temporal], 0, t_a)?;
    let appearance = g.add(app, pos_a)?;

    let mot = g.constant(sample.motion.clone());
    let mot = linear(g, pv, &lay.proj_mot, mot)?;
    let pos_m = g.slice_rows(pv[lay.pos_temporal], 0, t_m)?;
    let motion = g.add(mot, pos_m)?;

    let mut padded = sample.regions.data().to_vec();
    padded.resize(config.max_regions * config.d_reg, 0.0);
    let reg = g.constant(Tensor::new(vec![config.max_regions, config.d_reg], padded)?);
    let regions = linear(g, pv, &lay.proj_reg, reg)?;
    let region_valid = (0..config.max_regions).map(|i| i < k).collect();

    let typ = g.gather_rows(pv[lay.type_emb], &[sample.boundary_type_id])?;
    let boundary_type = linear(g, pv, &lay.proj_typ, typ)?;

    let emb = g.gather_rows(pv[lay.token_emb], prefix)?;
    let cap = linear(g, pv, &lay.proj_cap, emb)?;
    let pos_c = g.slice_rows(pv[lay.pos_caption], 0, prefix.len())?;
    let caption = g.add(cap, pos_c)?;

    Ok(Projected {
        appearance,
        motion,
        regions,
        boundary_type,
        caption,
        region_valid,
    })
}

/// Concatenates `[X_R, X_B, X_C]` and `[X_A, X_M, X_B, X_C]` in that order.
pub fn build_streams(g: &mut Graph<'_>, x: &Projected) -> Result<Streams> {
    let rows = |g: &Graph<'_>, v: Var| g.shape(v)[0];
    let local = g.concat_rows(&[x.regions, x.boundary_type, x.caption])?;
    let global = g.concat_rows(&[x.appearance, x.motion, x.boundary_type, x.caption])?;
    let local_layout = StreamLayout::new(&[
        (Segment::Region, rows(g, x.regions), Some(&x.region_valid)),
        (Segment::BoundaryType, 1, None),
        (Segment::Caption, rows(g, x.caption), None),
    ]);
    let global_layout = StreamLayout::new(&[
        (Segment::Appearance, rows(g, x.appearance), None),
        (Segment::Motion, rows(g, x.motion), None),
        (Segment::BoundaryType, 1, None),
        (Segment::Caption, rows(g, x.caption), None),
    ]);
    Ok(Streams {
        local,
        global,
        local_layout,
        global_layout,
    })
}

struct AttentionCall<'m> {
    layer: usize,
    stream: StreamKind,
    kind: AttentionKind,
    mask: &'m Arc<Mask>,
}

#[allow(clippy::too_many_arguments)]
fn multi_head(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    a: &AttentionParams,
    heads: usize,
    query: Var,
    kv: Var,
    call: AttentionCall<'_>,
    probes: &mut Vec<AttentionProbe>,
) -> Result<Var> {
    let q = g.matmul(query, pv[a.wq])?;
    let k = g.matmul(kv, pv[a.wk])?;
    let v = g.matmul(kv, pv[a.wv])?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let (o, w) = attention_with_weights(g, qh, kh, vh, Some(call.mask.clone()))?;
        probes.push(AttentionProbe {
            layer: call.layer,
            stream: call.stream,
            kind: call.kind,
            head: h,
            weights: w,
            mask: call.mask.clone(),
        });
        outs.push(o);
    }
    let merged = g.concat_cols(&outs)?;
    let proj = g.matmul(merged, pv[a.wo])?;
    g.add_row(proj, pv[a.bo])
}

fn residual_norm(g: &mut Graph<'_>, pv: &ParamVars, n: &NormParams, x: Var, update: Var) -> Result<Var> {
    let sum = g.add(x, update)?;
    g.layer_norm(sum, pv[n.gain], pv[n.bias])
}

fn feed_forward(g: &mut Graph<'_>, pv: &ParamVars, f: &FeedForwardParams, x: Var) -> Result<Var> {
    let h = linear(g, pv, &f.inner, x)?;
    let h = g.gelu(h);
    linear(g, pv, &f.outer, h)
}

/// Masks for one forward pass; they depend only on the stream layouts.
#[derive(Debug, Clone)]
pub struct LayerMasks {
    pub local_self: Arc<Mask>,
    pub global_self: Arc<Mask>,
    pub local_cross: Arc<Mask>,
    pub global_cross: Arc<Mask>,
}

impl LayerMasks {
    pub fn new(local: &StreamLayout, global: &StreamLayout) -> Self {
        Self {
            local_self: Arc::new(local.self_mask()),
            global_self: Arc::new(global.self_mask()),
            local_cross: Arc::new(local.cross_mask(global)),
            global_cross: Arc::new(global.cross_mask(local)),
        }
    }
}

/// One encoder layer: self-attention in each stream, cross-attention between
/// the self-attended streams, then a feed-forward block per stream.
#[allow(clippy::too_many_arguments)]
pub fn encode_layer(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    layer: &LayerParams,
    index: usize,
    heads: usize,
    local: Var,
    global: Var,
    masks: &LayerMasks,
    probes: &mut Vec<AttentionProbe>,
) -> Result<(Var, Var)> {
    let call = |stream, kind, mask| AttentionCall {
        layer: index,
        stream,
        kind,
        mask,
    };
    let (lp, gp): (&StreamLayerParams, &StreamLayerParams) = (&layer.local, &layer.global);

    let sa_l = multi_head(
        g,
        pv,
        &lp.self_attn,
        heads,
        local,
        local,
        call(StreamKind::Local, AttentionKind::SelfAttention, &masks.local_self),
        probes,
    )?;
    let x_l = residual_norm(g, pv, &lp.norm_self, local, sa_l)?;
    let sa_g = multi_head(
        g,
        pv,
        &gp.self_attn,
        heads,
        global,
        global,
        call(StreamKind::Global, AttentionKind::SelfAttention, &masks.global_self),
        probes,
    )?;
    let x_g = residual_norm(g, pv, &gp.norm_self, global, sa_g)?;

    let ca_l = multi_head(
        g,
        pv,
        &lp.cross_attn,
        heads,
        x_l,
        x_g,
        call(StreamKind::Local, AttentionKind::CrossAttention, &masks.local_cross),
        probes,
    )?;
    let ca_g = multi_head(
        g,
        pv,
        &gp.cross_attn,
        heads,
        x_g,
        x_l,
        call(StreamKind::Global, AttentionKind::CrossAttention, &masks.global_cross),
        probes,
    )?;
    let y_l = residual_norm(g, pv, &lp.norm_cross, x_l, ca_l)?;
    let y_g = residual_norm(g, pv, &gp.norm_cross, x_g, ca_g)?;

    let f_l = feed_forward(g, pv, &lp.ffn, y_l)?;
    let out_l = residual_norm(g, pv, &lp.norm_ffn, y_l, f_l)?;
    let f_g = feed_forward(g, pv, &gp.ffn, y_g)?;
    let out_g = residual_norm(g, pv, &gp.norm_ffn, y_g, f_g)?;
    Ok((out_l, out_g))
}

/// `(λ1·P_l + λ2·P_g) / (λ1 + λ2)`.
pub fn fuse(g: &mut Graph<'_>, p_local: Var, p_global: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    let a = g.scale(p_local, lambda1);
    let b = g.scale(p_global, lambda2);
    let s = g.add(a, b)?;
    Ok(g.scale(s, 1.0 / (lambda1 + lambda2)))
}

fn check_prefix(config: &ModelConfig, prefix: &[usize]) -> Result<()> {
    let tags = CaptionField::ALL.map(CaptionField::tag);
    if prefix.len() < 2 || prefix[0] != BOS || !tags.contains(&prefix[1]) {
        return Err(Error::contract("forward", "prefix must start with BOS and a field tag"));
    }
    if prefix.len() > config.max_caption_len {
        return Err(Error::contract(
            "forward",
            format!(
                "prefix length {} exceeds max_caption_len={}",
                prefix.len(),
                config.max_caption_len
            ),
        ));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract("forward", format!("token {bad} outside vocabulary")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl DualStreamModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Records the full forward pass on `g`. Returns handles to the three
    /// `L × V` probability matrices (one row per prefix position).
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        pv: &ParamVars,
        sample: &BoundarySample,
        prefix: &[usize],
    ) -> Result<ForwardVars> {
        let c = &self.config;
        check_prefix(c, prefix)?;
        let projected = project_features(g, pv, &self.params, c, sample, prefix)?;
        let streams = build_streams(g, &projected)?;
        let masks = LayerMasks::new(&streams.local_layout, &streams.global_layout);
        let mut probes = Vec::new();
        let (mut local, mut global) = (streams.local, streams.global);
        for (i, layer) in self.params.layout.layers.iter().enumerate() {
            (local, global) = encode_layer(g, pv, layer, i, c.heads, local, global, &masks, &mut probes)?;
        }
        let head = |g: &mut Graph<'a>, x: Var, layout: &StreamLayout, lin: &Linear| -> Result<Var> {
            let rows = layout.caption_rows();
            let cap = g.slice_rows(x, rows.start, rows.len())?;
            let logits = linear(g, pv, lin, cap)?;
            g.softmax_rows(logits)
        };
        let p_local = head(g, local, &streams.local_layout, &self.params.layout.head_local)?;
        let p_global = head(g, global, &streams.global_layout, &self.params.layout.head_global)?;
        let p_fused = fuse(g, p_local, p_global, c.lambda1, c.lambda2)?;
        Ok(ForwardVars {
            p_local,
            p_global,
            p_fused,
            attention: probes,
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, sample: &BoundarySample, prefix: &[usize]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let out = self.forward_graph(&mut g, &pv, sample, prefix)?;
        Ok(ForwardOutput {
            p_local: g.value(out.p_local),
            p_global: g.value(out.p_global),
            p_fused: g.value(out.p_fused),
        })
    }
}
