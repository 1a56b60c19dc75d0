//! Learnable parameters of the dual-stream network.
//!
//! The set of parameters, their names, shapes and order are a pure function
//! of [`ModelConfig`]: [`plan`] enumerates them once and every other routine
//! (initialization, counting, checkpoint loading) follows that enumeration.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

pub const EMBEDDING_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform on `±1/√fan_in`, where fan-in is the row count.
    FanIn,
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub inner: Linear,
    pub outer: Linear,
}

/// One stream's share of an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayerParams {
    pub self_attn: AttentionParams,
    pub norm_self: NormParams,
    pub cross_attn: AttentionParams,
    pub norm_cross: NormParams,
    pub ffn: FeedForwardParams,
    pub norm_ffn: NormParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub local: StreamLayerParams,
    pub global: StreamLayerParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub proj_app: Linear,
    pub proj_mot: Linear,
    pub proj_reg: Linear,
    pub proj_typ: Linear,
    pub proj_cap: Linear,
    pub token_emb: ParamId,
    pub type_emb: ParamId,
    pub pos_temporal: ParamId,
    pub pos_caption: ParamId,
    pub layers: Vec<LayerParams>,
    pub head_local: Linear,
    pub head_global: Linear,
}

struct Planner {
    specs: Vec<ParamSpec>,
}

impl Planner {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape: [rows, cols],
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Linear {
        Linear {
            weight: self.add(format!("{name}.weight"), fan_in, fan_out, init),
            bias: self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{name}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{name}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.add(format!("{name}.wq"), d, d, Init::FanIn),
            wk: self.add(format!("{name}.wk"), d, d, Init::FanIn),
            wv: self.add(format!("{name}.wv"), d, d, Init::FanIn),
            wo: self.add(format!("{name}.wo"), d, d, Init::FanIn),
            bo: self.add(format!("{name}.bo"), 1, d, Init::Zeros),
        }
    }

    fn stream_layer(&mut self, prefix: &str, c: &ModelConfig) -> StreamLayerParams {
        StreamLayerParams {
            self_attn: self.attention(&format!("{prefix}.self_attn"), c.d),
            norm_self: self.norm(&format!("{prefix}.norm_self"), c.d),
            cross_attn: self.attention(&format!("{prefix}.cross_attn"), c.d),
            norm_cross: self.norm(&format!("{prefix}.norm_cross"), c.d),
            ffn: FeedForwardParams {
                inner: self.linear(&format!("{prefix}.ffn.inner"), c.d, c.ffn_dim(), Init::FanIn),
                outer: self.linear(&format!("{prefix}.ffn.outer"), c.ffn_dim(), c.d, Init::FanIn),
            },
            norm_ffn: self.norm(&format!("{prefix}.norm_ffn"), c.d),
        }
    }
}

/// Enumerates every parameter for `config` in canonical order.
pub fn plan(config: &ModelConfig) -> (ParamLayout, Vec<ParamSpec>) {
    let c = config;
    let mut p = Planner { specs: Vec::new() };
    let proj_app = p.linear("proj.appearance", c.d_app, c.d, Init::FanIn);
    let proj_mot = p.linear("proj.motion", c.d_mot, c.d, Init::FanIn);
    let proj_reg = p.linear("proj.region", c.d_reg, c.d, Init::FanIn);
    let proj_typ = p.linear("proj.boundary_type", c.d_typ, c.d, Init::FanIn);
    let proj_cap = p.linear("proj.caption", c.d_emb, c.d, Init::FanIn);
    let token_emb = p.add("embed.token".into(), c.vocab_size, c.d_emb, Init::Normal(EMBEDDING_STD));
    let type_emb = p.add(
        "embed.boundary_type".into(),
        c.num_boundary_types,
        c.d_typ,
        Init::Normal(EMBEDDING_STD),
    );
    let pos_temporal = p.add("pos.temporal".into(), c.max_frames, c.d, Init::Normal(EMBEDDING_STD));
    let pos_caption = p.add(
        "pos.caption".into(),
        c.max_caption_len,
        c.d,
        Init::Normal(EMBEDDING_STD),
    );
    let layers = (0..c.layers)
        .map(|i| LayerParams {
            local: p.stream_layer(&format!("layer{i}.local"), c),
            global: p.stream_layer(&format!("layer{i}.global"), c),
        })
        .collect();
    // Zero heads start both streams at the uniform distribution.
    let head_local = p.linear("head.local", c.d, c.vocab_size, Init::Zeros);
    let head_global = p.linear("head.global", c.d, c.vocab_size, Init::Zeros);
    let layout = ParamLayout {
        proj_app,
        proj_mot,
        proj_reg,
        proj_typ,
        proj_cap,
        token_emb,
        type_emb,
        pos_temporal,
        pos_caption,
        layers,
        head_local,
        head_global,
    };
    (layout, p.specs)
}

/// Total scalar count for `config`, computed without allocating parameters.
pub fn parameter_count(config: &ModelConfig) -> usize {
    plan(config).1.iter().map(|s| s.shape[0] * s.shape[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

impl Index<ParamId> for ParamStore {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }
}

/// Graph handles for every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamVars {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.0.iter().enumerate().map(|(i, v)| (ParamId(i), *v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub store: ParamStore,
}

impl ModelParams {
    /// Seeded initialization: projection and attention weights uniform on
    /// `±1/√fan_in`, embeddings and positional tables `N(0, 0.02²)`, norm gains
    /// one, biases and vocabulary heads zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let [r, c] = s.shape;
            let data: Vec<f64> = match s.init {
                Init::Zeros => vec![0.0; r * c],
                Init::Ones => vec![1.0; r * c],
                Init::FanIn => {
                    let bound = 1.0 / (r as f64).sqrt();
                    (0..r * c).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..r * c).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.push(Param {
                name: s.name,
                value: Tensor::new(vec![r, c], data)?,
            });
        }
        Ok(Self {
            layout,
            store: ParamStore { params },
        })
    }

    /// Assembles parameters from `(name, tensor)` pairs that must match the
    /// canonical plan for `config` exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                named.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(named)
            .map(|(spec, (name, value))| {
                if spec.name != name || value.shape() != spec.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` {:?} does not match expected `{}` {:?}",
                        value.shape(),
                        spec.name,
                        spec.shape
                    )));
                }
                Ok(Param { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layout,
            store: ParamStore { params },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Adds uniform noise in `±scale` to every entry.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.store.params {
            for v in p.value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    /// Registers every parameter as a borrowed leaf of `g`.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.store
                .params
                .iter()
                .map(|p| g.param(&p.value, requires_grad))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetHeader;
    use crate::model::config::Profile;

    fn config() -> ModelConfig {
        let header = DatasetHeader {
            d_app: 6,
            d_mot: 5,
            d_reg: 4,
            d_typ: 3,
            boundary_types: vec!["x".into(), "y".into()],
            ..DatasetHeader::default()
        };
        ModelConfig::for_dataset(Profile::Desk, &header, 15)
    }

    #[test]
    fn count_is_pure_function_of_config() {
        let c = config();
        let a = ModelParams::init(&c, 1).unwrap();
        let b = ModelParams::init(&c, 2).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.parameter_count(), parameter_count(&c));
        assert_ne!(a, b);
    }

    #[test]
    fn init_is_deterministic() {
        let c = config();
        assert_eq!(ModelParams::init(&c, 9).unwrap(), ModelParams::init(&c, 9).unwrap());
    }

    #[test]
    fn heads_start_at_zero() {
        let p = ModelParams::init(&config(), 0).unwrap();
        assert!(p.store[p.layout.head_local.weight].data().iter().all(|&v| v == 0.0));
        let w = &p.store[p.layout.proj_app.weight];
        let bound = 1.0 / 6f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn from_named_checks_plan() {
        let c = config();
        let p = ModelParams::init(&c, 0).unwrap();
        let named: Vec<_> = p.store.iter().map(|q| (q.name.clone(), q.value.clone())).collect();
        assert_eq!(ModelParams::from_named(&c, named.clone()).unwrap(), p);
        let mut renamed = named.clone();
        renamed[0].0 = "bogus".into();
        assert!(ModelParams::from_named(&c, renamed).is_err());
        assert!(ModelParams::from_named(&c, named[1..].to_vec()).is_err());
    }
}
