use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::vocab::CaptionField;
use crate::data::{BoundarySample, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::config::check_lambdas;
use crate::model::{DualStreamModel, ModelConfig, Profile};
use crate::tensor::Tensor;
use crate::training::adam::{adam_step, AdamConfig, OptimizerState};
use crate::training::loss::teacher_forced_loss;

/// Mixed into the run seed so the shuffle stream differs from the init stream.
const SHUFFLE_SALT: u64 = 0x0005_4f1e_d0c5_a11e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: match profile {
                Profile::Paper => 100,
                Profile::Desk => 8,
            },
            lambda1: 0.5,
            lambda2: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambdas(self.lambda1, self.lambda2)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean step loss per epoch, including a final partial epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for l in &self.steps {
            s.push_str(&format!("{},{},{:?}\n", l.epoch, l.step, l.loss));
        }
        s
    }
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample: usize,
    pub field: CaptionField,
    pub caption: Vec<usize>,
}

/// Every (sample, field) pair of `dataset`, in file order.
pub fn examples(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(dataset.samples.len() * 3);
    for (i, s) in dataset.samples.iter().enumerate() {
        for field in CaptionField::ALL {
            let caption = s.captions.encode(field, &dataset.vocab);
            if caption.len() + 2 > config.max_caption_len {
                return Err(Error::Schema {
                    sample: s.boundary_id.clone(),
                    detail: format!(
                        "{field} caption has {} words, max_caption_len {} allows {}",
                        caption.len(),
                        config.max_caption_len,
                        config.max_caption_len - 2
                    ),
                });
            }
            out.push(Example {
                sample: i,
                field,
                caption,
            });
        }
    }
    Ok(out)
}

fn check_compatible(dataset: &Dataset, c: &ModelConfig) -> Result<()> {
    let h = &dataset.header;
    let pairs = [
        ("vocab_size", dataset.vocab.len(), c.vocab_size),
        ("d_app", h.d_app, c.d_app),
        ("d_mot", h.d_mot, c.d_mot),
        ("d_reg", h.d_reg, c.d_reg),
        ("d_typ", h.d_typ, c.d_typ),
        ("num_boundary_types", h.boundary_types.len(), c.num_boundary_types),
    ];
    for (name, data, model) in pairs {
        if data != model {
            return Err(Error::Config(format!(
                "dataset has {name}={data}, model expects {model}"
            )));
        }
    }
    if h.max_regions > c.max_regions {
        return Err(Error::Config(format!(
            "dataset allows {} regions, model pads to {}",
            h.max_regions, c.max_regions
        )));
    }
    Ok(())
}

/// Loss and per-parameter gradients for one example.
pub fn example_gradients(
    model: &DualStreamModel,
    sample: &BoundarySample,
    field: CaptionField,
    caption: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = model.params.register(&mut g, true);
    let loss = teacher_forced_loss(model, &mut g, &pv, sample, field, caption, lambda1, lambda2)?;
    g.backward(loss)?;
    let grads = pv.iter().map(|(_, v)| g.grad(v)).collect();
    Ok((g.data(loss)[0], grads))
}

/// Mean loss and mean gradient over a batch. Examples run in parallel but
/// are reduced in batch order, so the result does not depend on the thread
/// count.
pub fn batch_gradients(
    model: &DualStreamModel,
    dataset: &Dataset,
    batch: &[&Example],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("batch_gradients", "empty batch"));
    }
    let results = batch
        .par_iter()
        .map(|e| example_gradients(model, &dataset.samples[e.sample], e.field, &e.caption, lambda1, lambda2))
        .collect::<Result<Vec<_>>>()?;
    let mut it = results.into_iter();
    let (mut loss, mut acc) = it.next().expect("nonempty batch");
    for (l, grads) in it {
        loss += l;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    let n = batch.len() as f64;
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    Ok((loss / n, acc))
}

/// Trains `model` in place. The stream weights of `cfg` replace those in the
/// model config, so inference fuses with the weights the loss used.
pub fn train_model(model: &mut DualStreamModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.lambda1 = cfg.lambda1;
    model.config.lambda2 = cfg.lambda2;
    model.config.validate()?;
    check_compatible(dataset, &model.config)?;
    let examples = examples(dataset, &model.config)?;
    let mut report = TrainReport::default();
    if examples.is_empty() || cfg.max_steps == Some(0) {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut state = OptimizerState::new(&model.params.store);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_gradients(model, dataset, &batch, cfg.lambda1, cfg.lambda2)?;
            if !loss.is_finite() {
                return Err(Error::contract("train", format!("non-finite loss at step {step}")));
            }
            let grads: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
            adam_step(&mut model.params.store, &grads, &mut state, &adam)?;
            report.steps.push(StepLog { epoch, step, loss });
            total += loss;
            count += 1;
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                report.epoch_losses.push(total / count as f64);
                break 'epochs;
            }
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok(report)
}

/// Initializes a model for `dataset` from `config` and `cfg.seed`, then trains it.
pub fn train(dataset: &Dataset, config: ModelConfig, cfg: &TrainConfig) -> Result<(DualStreamModel, TrainReport)> {
    let mut model = DualStreamModel::new(config, cfg.seed)?;
    let report = train_model(&mut model, dataset, cfg)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, synth_dataset, SynthConfig};

    fn tiny() -> (Dataset, ModelConfig) {
        let ds = parse_dataset(&synth_dataset(3, 4, &SynthConfig::default()).unwrap()).unwrap();
        let mut c = ModelConfig::for_dataset(Profile::Desk, &ds.header, ds.vocab.len());
        c.layers = 1;
        c.d = 8;
        c.heads = 2;
        c.d_emb = 8;
        (ds, c)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 2,
            batch_size: 5,
            seed: 11,
            ..TrainConfig::for_profile(Profile::Desk)
        }
    }

    #[test]
    fn first_loss_is_log_vocab() {
        let (ds, c) = tiny();
        let v = c.vocab_size as f64;
        let (_, report) = train(
            &ds,
            c,
            &TrainConfig {
                max_steps: Some(1),
                ..cfg()
            },
        )
        .unwrap();
        assert!((report.steps[0].loss - v.ln()).abs() < 1e-12, "{:?}", report.steps[0]);
    }

    #[test]
    fn runs_are_reproducible_and_loss_drops() {
        let (ds, c) = tiny();
        let (m1, r1) = train(&ds, c.clone(), &cfg()).unwrap();
        let (m2, r2) = train(&ds, c, &cfg()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        // 12 examples in batches of 5 gives 3 steps per epoch.
        assert_eq!(r1.steps.len(), 6);
        assert_eq!(r1.epoch_losses.len(), 2);
        assert!(r1.epoch_losses[1] < r1.epoch_losses[0], "{:?}", r1.epoch_losses);
    }

    #[test]
    fn max_steps_truncates() {
        let (ds, c) = tiny();
        let (_, r) = train(
            &ds,
            c,
            &TrainConfig {
                max_steps: Some(4),
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(r.steps.len(), 4);
        assert_eq!(r.epoch_losses.len(), 2);
        assert!(r.loss_csv().starts_with("epoch,step,loss\n0,0,"));
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let (ds, mut c) = tiny();
        c.vocab_size += 1;
        assert!(matches!(train(&ds, c, &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn overlong_caption_is_reported() {
        let (ds, mut c) = tiny();
        c.max_caption_len = 3;
        assert!(matches!(train(&ds, c, &cfg()), Err(Error::Schema { .. })));
    }
}
