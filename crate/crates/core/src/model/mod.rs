//! Miniature pre-norm decoder-only transformer.
//!
//! All parameters live in one flat buffer described by a [`ParamLayout`], so
//! the optimizer, checkpointing and gradient checks treat them uniformly.
//! Linear weights are stored `[in, out]` row-major (`y = x W + b`).

mod checkpoint;
mod forward;
mod kv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::tensor::Real;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot};
pub use forward::{
    forward, forward_batch, forward_trace, lm_loss_grad, ForwardOutput, ForwardTrace, SeqInput,
};
pub(crate) use forward::{backward, head_backward, head_forward};
pub use kv::{capture_special_kv, decode_from_cache, BottleneckDecoder, Decoding, KVCacheSnapshot};

/// Temperature at initialization: `ln 20`.
pub const INIT_TEMPERATURE: f64 = 2.995_732_273_553_991;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 8192,
            max_positions: 512,
            dropout_rate: 0.1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GemError::invalid(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GemError::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(GemError::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut specs = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            let offset = total;
            specs.push(ParamSpec { name, shape, offset, len });
            total += len;
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_positions, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                wq: push(p("attn.wq"), vec![d, d]),
                bq: push(p("attn.bq"), vec![d]),
                wk: push(p("attn.wk"), vec![d, d]),
                bk: push(p("attn.bk"), vec![d]),
                wv: push(p("attn.wv"), vec![d, d]),
                bv: push(p("attn.bv"), vec![d]),
                wo: push(p("attn.wo"), vec![d, d]),
                bo: push(p("attn.bo"), vec![d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                w1: push(p("mlp.w1"), vec![d, ff]),
                b1: push(p("mlp.b1"), vec![ff]),
                w2: push(p("mlp.w2"), vec![ff, d]),
                b2: push(p("mlp.b2"), vec![d]),
            });
        }
        let lnf_g = push("lnf.gain".into(), vec![d]);
        let lnf_b = push("lnf.bias".into(), vec![d]);
        let w_out = push("out.w".into(), vec![d, v]);
        let b_out = push("out.b".into(), vec![v]);
        Self {
            specs,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Name of the tensor holding flat index `idx`.
    pub fn owner(&self, idx: usize) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| idx >= s.offset && idx < s.offset + s.len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    pub params: Vec<T>,
    pub temperature: T,
}

impl<T: Real> ModelState<T> {
    pub fn from_parts(config: ModelConfig, params: Vec<T>, temperature: T) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(GemError::invalid(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            temperature,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .spec(name)
            .map(|s| &self.params[s.offset..s.offset + s.len])
    }

    #[inline]
    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
            temperature: U::from_f64(self.temperature.to_f64().unwrap()).unwrap(),
        }
    }

    pub fn all_finite(&self) -> bool {
        crate::tensor::all_finite(&self.params) && self.temperature.is_finite()
    }
}

/// Seeded scaled-normal initialization. Weights are drawn in `f64` and then
/// rounded, so `f32` and `f64` models with the same seed agree to rounding.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<ModelState<T>> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = Normal::new(0.0, 0.02).expect("valid std");
    let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");

    let mut params = vec![T::zero(); layout.total()];
    for spec in layout.specs() {
        let dst = &mut params[spec.offset..spec.offset + spec.len];
        let name = spec.name.as_str();
        if name.ends_with(".gain") {
            dst.fill(T::one());
        } else if spec.shape.len() == 1 {
            // biases stay zero
        } else {
            let dist = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                &resid
            } else {
                &base
            };
            for x in dst.iter_mut() {
                *x = T::c(dist.sample(&mut rng));
            }
        }
    }
    Ok(ModelState {
        config: config.clone(),
        layout,
        params,
        temperature: T::c(INIT_TEMPERATURE),
    })
}
