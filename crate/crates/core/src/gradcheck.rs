//! Finite-difference gradient checking. The numeric side only ever reads
//! forward values, so it is independent of every backward rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::vocab::{CaptionField, RESERVED_COUNT};
use crate::data::{BoundarySample, CaptionTriplet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{DualStreamModel, ModelConfig};
use crate::tensor::Tensor;
use crate::training::loss::{teacher_forced_loss, teacher_forced_loss_value};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for [`relative_error`]. Central differences of an O(1)
/// loss carry roughly `1e-10` absolute round-off at [`FD_STEP`], so gradients
/// below this floor are compared absolutely instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Builds a scalar from graph inputs.
pub trait ScalarFn: Fn(&mut Graph<'_>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval_scalar(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t, false)).collect();
    let out = f(&mut g, &vars)?;
    if g.data(out).len() != 1 {
        return Err(Error::contract("gradcheck", "function must return a scalar"));
    }
    Ok(g.data(out)[0])
}

/// Largest relative error per input between backprop and central differences.
pub fn check_scalar_fn(inputs: &[Tensor], f: impl ScalarFn) -> Result<Vec<f64>> {
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t, true)).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        vars.iter().map(|&v| g.grad(v)).collect()
    };
    let mut work = inputs.to_vec();
    let mut worst = vec![0.0f64; inputs.len()];
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = x - FD_STEP;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst[i] = worst[i].max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Parameter group of a tensor name: everything before the final component.
fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Compares the backprop gradient of the teacher-forced loss with central
/// differences for every parameter entry of `model`.
pub fn check_model(
    model: &DualStreamModel,
    sample: &BoundarySample,
    field: CaptionField,
    caption: &[usize],
) -> Result<GradCheckReport> {
    let (l1, l2) = (model.config.lambda1, model.config.lambda2);
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let pv = model.params.register(&mut g, true);
        let loss = teacher_forced_loss(model, &mut g, &pv, sample, field, caption, l1, l2)?;
        g.backward(loss)?;
        pv.iter().map(|(_, v)| g.grad(v)).collect()
    };
    let mut work = model.clone();
    let mut groups: Vec<GroupError> = Vec::new();
    let ids: Vec<_> = model.params.store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let group = group_of(model.params.store.name(id)).to_string();
        let mut worst = 0.0f64;
        let n = model.params.store[id].numel();
        for j in 0..n {
            let x = work.params.store[id].data()[j];
            work.params.store.get_mut(id).data_mut()[j] = x + FD_STEP;
            let plus = teacher_forced_loss_value(&work, sample, field, caption, l1, l2)?;
            work.params.store.get_mut(id).data_mut()[j] = x - FD_STEP;
            let minus = teacher_forced_loss_value(&work, sample, field, caption, l1, l2)?;
            work.params.store.get_mut(id).data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
        match groups.last_mut() {
            Some(last) if last.group == group => {
                last.max_rel_error = last.max_rel_error.max(worst);
                last.entries += n;
            }
            _ => groups.push(GroupError {
                group,
                max_rel_error: worst,
                entries: n,
            }),
        }
    }
    Ok(GradCheckReport { groups })
}

/// A small random model and example for [`check_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub seed: u64,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub appearance_frames: usize,
    pub motion_frames: usize,
    pub regions: usize,
    /// Decoder prefix length including the start and field tokens.
    pub prefix_len: usize,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 8,
            heads: 2,
            layers: 1,
            vocab_size: 20,
            appearance_frames: 3,
            motion_frames: 2,
            regions: 4,
            prefix_len: 4,
        }
    }
}

/// Scale of the noise added to freshly initialized parameters, so that the
/// zero-initialized heads and unit norm gains are not a special case.
const JITTER: f64 = 0.1;

impl GradCheckSetup {
    pub fn build(&self) -> Result<(DualStreamModel, BoundarySample, Vec<usize>)> {
        if self.prefix_len < 3 {
            return Err(Error::Config("prefix_len must be at least 3".into()));
        }
        if self.vocab_size <= RESERVED_COUNT {
            return Err(Error::Config(format!("vocab_size must exceed {RESERVED_COUNT}")));
        }
        let config = ModelConfig {
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            d_emb: self.d,
            d_app: 5,
            d_mot: 4,
            d_reg: 6,
            d_typ: 3,
            vocab_size: self.vocab_size,
            num_boundary_types: 2,
            max_frames: self.appearance_frames.max(self.motion_frames),
            max_regions: self.regions + 2,
            max_caption_len: self.prefix_len + 1,
            lambda1: 0.4,
            lambda2: 0.6,
        };
        let mut model = DualStreamModel::new(config, self.seed)?;
        model.params.jitter(self.seed.wrapping_add(1), JITTER);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(2));
        let mut feats = |rows: usize, cols: usize| -> Result<Tensor> {
            let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![rows, cols], data)
        };
        let sample = BoundarySample {
            boundary_id: "gradcheck".into(),
            appearance: feats(self.appearance_frames, 5)?,
            motion: feats(self.motion_frames, 4)?,
            regions: feats(self.regions, 6)?,
            boundary_type_id: 1,
            captions: CaptionTriplet::from_text("x", "x", "x"),
        };
        let words = self.vocab_size - RESERVED_COUNT;
        let caption = (0..self.prefix_len - 2)
            .map(|i| RESERVED_COUNT + (i * 7 + self.seed as usize) % words)
            .collect();
        Ok((model, sample, caption))
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        let (model, sample, caption) = self.build()?;
        check_model(&model, &sample, CaptionField::After, &caption)
    }
}
