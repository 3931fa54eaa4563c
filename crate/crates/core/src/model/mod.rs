//! Decoder-only causal transformer with two output heads over a shared
//! backbone, exact reverse-mode gradients, Adam, and grammar-constrained
//! sampling.
//!
//! All parameters live in one flat `f64` buffer; [`ParamSpec`] names each
//! tensor and assigns it to a [`ParamGroup`]. Gradients use the same layout,
//! so optimizer state, checkpoints and finite-difference checks can address
//! any scalar by its flat index.

mod adam;
mod decode;
pub mod gradcheck;
pub(crate) mod linalg;
mod loss;
mod transformer;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Role, CONTEXT, VOCAB_SIZE};

pub use adam::{adam_step, adam_update, AdamConfig, OptimState, StepReport};
pub use decode::{sample, sample_group, Decoding, KvCache, Sampled};
pub use loss::{
    cross_entropy, kl_restricted, restricted_log_softmax, target_masks, LogitsTable,
};
pub use transformer::{BackwardFault, Forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
    /// Start both output heads at exactly zero (uniform predictions).
    pub zero_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context: CONTEXT,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            init_std: 0.02,
            zero_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("context, d_ff and n_layers must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!("bad init_std {}", self.init_std)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Named tensors in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, f, v) = (self.d_model, self.d_ff, VOCAB_SIZE);
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, group: ParamGroup, kind: InitKind| {
            let len = shape.iter().product();
            specs.push(ParamSpec { name, shape, offset, len, group, kind });
            offset += len;
        };
        use InitKind::*;
        use ParamGroup::*;
        push("tok_emb".into(), vec![v, d], Backbone, Weight);
        push("pos_emb".into(), vec![self.context, d], Backbone, Weight);
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            push(p("ln1.gain"), vec![d], Backbone, One);
            push(p("ln1.bias"), vec![d], Backbone, Zero);
            push(p("attn.qkv.weight"), vec![d, 3 * d], Backbone, Weight);
            push(p("attn.qkv.bias"), vec![3 * d], Backbone, Zero);
            push(p("attn.out.weight"), vec![d, d], Backbone, Weight);
            push(p("attn.out.bias"), vec![d], Backbone, Zero);
            push(p("ln2.gain"), vec![d], Backbone, One);
            push(p("ln2.bias"), vec![d], Backbone, Zero);
            push(p("mlp.fc.weight"), vec![d, f], Backbone, Weight);
            push(p("mlp.fc.bias"), vec![f], Backbone, Zero);
            push(p("mlp.proj.weight"), vec![f, d], Backbone, Weight);
            push(p("mlp.proj.bias"), vec![d], Backbone, Zero);
        }
        push("ln_f.gain".into(), vec![d], Backbone, One);
        push("ln_f.bias".into(), vec![d], Backbone, Zero);
        push("head_und.weight".into(), vec![d, v], Und, HeadWeight);
        push("head_und.bias".into(), vec![v], Und, Zero);
        push("head_gen.weight".into(), vec![d, v], Gen, HeadWeight);
        push("head_gen.bias".into(), vec![v], Gen, Zero);
        specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|s| s.len).sum()
    }
}

/// Optimizer partition of the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    /// Layout head.
    Und,
    /// Image head.
    Gen,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Und, ParamGroup::Gen];

    pub(crate) fn index(self) -> usize {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Und => 1,
            ParamGroup::Gen => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InitKind {
    Weight,
    HeadWeight,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub group: ParamGroup,
    pub(crate) kind: InitKind,
}

impl ParamSpec {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Which output head scores a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Layout,
    Image,
}

impl Head {
    pub fn for_role(role: Role) -> Option<Head> {
        match role {
            Role::Prompt => None,
            Role::LayoutTarget => Some(Head::Layout),
            Role::ImageTarget => Some(Head::Image),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wqkv: usize,
    pub bqkv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: [usize; 2],
    pub head_b: [usize; 2],
}

impl Offsets {
    pub fn head(&self, head: Head) -> (usize, usize) {
        let i = match head {
            Head::Layout => 0,
            Head::Image => 1,
        };
        (self.head_w[i], self.head_b[i])
    }
}

#[derive(Debug)]
pub(crate) struct Architecture {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub offsets: Offsets,
    pub num_params: usize,
}

impl Architecture {
    fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let at = |name: &str| {
            specs
                .iter()
                .find(|s| s.name == name)
                .map(|s| s.offset)
                .expect("parameter table is built alongside its lookups")
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| at(&format!("layers.{l}.{s}"));
                LayerOffsets {
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    wqkv: p("attn.qkv.weight"),
                    bqkv: p("attn.qkv.bias"),
                    wo: p("attn.out.weight"),
                    bo: p("attn.out.bias"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                    w1: p("mlp.fc.weight"),
                    b1: p("mlp.fc.bias"),
                    w2: p("mlp.proj.weight"),
                    b2: p("mlp.proj.bias"),
                }
            })
            .collect();
        let offsets = Offsets {
            tok_emb: at("tok_emb"),
            pos_emb: at("pos_emb"),
            layers,
            lnf_g: at("ln_f.gain"),
            lnf_b: at("ln_f.bias"),
            head_w: [at("head_und.weight"), at("head_gen.weight")],
            head_b: [at("head_und.bias"), at("head_gen.bias")],
        };
        let num_params = specs.iter().map(|s| s.len).sum();
        Ok(Self {
            config,
            specs,
            offsets,
            num_params,
        })
    }
}

/// Full parameter set of the unified model.
#[derive(Debug, Clone)]
pub struct Policy {
    pub(crate) arch: Arc<Architecture>,
    pub(crate) params: Vec<f64>,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.arch.config == other.arch.config && self.params == other.params
    }
}

impl Policy {
    /// Gaussian(0, init_std) weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Arc::new(Architecture::new(config)?);
        let mut params = vec![0.0; arch.num_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = arch.config.init_std;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for spec in &arch.specs {
            let slot = &mut params[spec.range()];
            match spec.kind {
                InitKind::Weight => slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng)),
                InitKind::HeadWeight if !arch.config.zero_heads => {
                    slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng))
                }
                InitKind::HeadWeight | InitKind::Zero => slot.fill(0.0),
                InitKind::One => slot.fill(1.0),
            }
        }
        Ok(Self { arch, params })
    }

    /// Rebuilds a policy from a flat buffer laid out per `config.param_specs()`.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let arch = Arc::new(Architecture::new(config)?);
        if params.len() != arch.num_params {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                arch.num_params,
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.arch.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the raw buffer (finite-difference probes, fixtures).
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.arch.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.params[s.range()])
    }

    /// Values of every tensor in `group`, concatenated in storage order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.arch
            .specs
            .iter()
            .filter(|s| s.group == group)
            .flat_map(|s| self.params[s.range()].iter().copied())
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Sums per-item gradients in item order.
///
/// `f` runs for each item (in parallel when the rayon pool has threads) and
/// returns a loss contribution plus a gradient buffer; the reduction order is
/// fixed, so the result does not depend on the thread count.
pub fn reduce_gradients<T, F>(policy: &Policy, items: &[T], f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<f64>)> + Sync,
{
    use rayon::prelude::*;
    let parts: Vec<Result<(f64, Vec<f64>)>> = items.par_iter().map(&f).collect();
    let mut total = 0.0;
    let mut grads = policy.zero_grads();
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((total, grads))
}

pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_parameters() {
        let cfg = ModelConfig::default();
        let specs = cfg.param_specs();
        let mut next = 0;
        for s in &specs {
            assert_eq!(s.offset, next, "{} not contiguous", s.name);
            next += s.len;
        }
        let names: std::collections::HashSet<_> = specs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), specs.len());
        let und: Vec<_> = specs.iter().filter(|s| s.group == ParamGroup::Und).map(|s| s.name.as_str()).collect();
        let gen: Vec<_> = specs.iter().filter(|s| s.group == ParamGroup::Gen).map(|s| s.name.as_str()).collect();
        assert_eq!(und, ["head_und.weight", "head_und.bias"]);
        assert_eq!(gen, ["head_gen.weight", "head_gen.bias"]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Policy::new(ModelConfig::default(), 5).unwrap();
        let b = Policy::new(ModelConfig::default(), 5).unwrap();
        let c = Policy::new(ModelConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensor("ln_f.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("head_und.bias").unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_heads_option() {
        let cfg = ModelConfig { zero_heads: true, ..ModelConfig::default() };
        let p = Policy::new(cfg, 1).unwrap();
        assert!(p.tensor("head_gen.weight").unwrap().iter().all(|&w| w == 0.0));
        assert!(p.tensor("tok_emb").unwrap().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig { d_model: 30, n_heads: 4, ..ModelConfig::default() };
        assert!(Policy::new(cfg, 0).is_err());
    }
}
