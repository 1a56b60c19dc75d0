use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter in store order.
/// `grads[i]` is the gradient of parameter `i`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract(
            "adam_step",
            format!(
                "{} gradients / {} moment buffers for {} parameters",
                grads.len(),
                state.m.len(),
                store.len()
            ),
        ));
    }
    // Validate everything before mutating anything.
    for (id, g) in store.ids().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(store.name(id).to_string()))?;
        if g.shape() != store[id].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: store[id].shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads[i].as_ref().expect("validated above").data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
