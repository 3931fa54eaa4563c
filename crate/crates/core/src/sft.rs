//! Supervised warm-up on both directions.
//!
//! Understanding is teacher-forced on ground-truth images. Generation is
//! conditioned on the ground-truth layout for the first
//! `predicted_conditioning_warmup` steps and on the policy's own greedy
//! layout prediction afterwards, so the generator learns to draw from the
//! structures the understanding branch actually produces.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::metrics::MetricsWriter;
use crate::model::{
    adam_step, cross_entropy, reduce_gradients, sample, AdamConfig, Decoding, OptimState, ParamGroup, Policy,
};
use crate::tokenizer::{
    build_prompt, build_sequence, decode_layout, encode_image, encode_layout, DecodeMode, Direction, TokenId,
    TokenSeq,
};
use crate::world::{rasterize, GridImage, Layout, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: u64,
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate reached at the last step by cosine decay; equal to
    /// `lr` for a constant schedule.
    pub lr_min: f64,
    pub batch: usize,
    /// Steps conditioned on ground-truth layouts before switching to the
    /// policy's own predictions.
    pub predicted_conditioning_warmup: u64,
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    /// Intermediate checkpoint interval; `None` writes only the final one.
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 12_000,
            lr: 2e-3,
            lr_min: 1e-4,
            batch: 4,
            predicted_conditioning_warmup: 2_400,
            clip_norm: Some(1.0),
            log_every: 50,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sft steps must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("sft batch must be > 0".into()));
        }
        if self.predicted_conditioning_warmup > self.steps {
            return Err(Error::Config(format!(
                "predicted_conditioning_warmup {} exceeds steps {}",
                self.predicted_conditioning_warmup, self.steps
            )));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr, got lr {} lr_min {}",
                self.lr, self.lr_min
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let span = self.steps.saturating_sub(1).max(1) as f64;
        let frac = (step as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    fn adam(&self, step: u64) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(step),
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLosses {
    pub l_und: f64,
    pub l_gen: f64,
    pub l_sft: f64,
}

/// Outcome of one supervised step.
#[derive(Debug, Clone, PartialEq)]
pub struct SftStep {
    pub losses: SftLosses,
    pub grad_norm: f64,
    /// Layout tokens each generation sequence of the batch was conditioned on.
    pub gen_conditioning: Vec<Vec<TokenId>>,
    pub predicted: bool,
}

/// Greedy constrained image-to-layout decode; treated as data downstream.
pub fn predict_layout_greedy(policy: &Policy, img: &GridImage) -> Result<Layout> {
    let prompt = build_prompt(Direction::Und, &encode_image(img));
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = sample(policy, &prompt, Direction::Und, Decoding::Greedy, &mut unused)?;
    decode_layout(&out.tokens, DecodeMode::Strict)
}

/// Pooled token-level cross-entropy for both directions and their gradient.
///
/// Returns `(l_und, l_gen, grads of l_und + l_gen)`; each loss is the mean
/// over every target token of its direction across the batch.
pub fn supervised_loss(policy: &Policy, pairs: &[(TokenSeq, TokenSeq)]) -> Result<(f64, f64, Vec<f64>)> {
    let n_und: usize = pairs.iter().map(|(u, _)| u.num_targets()).sum();
    let n_gen: usize = pairs.iter().map(|(_, g)| g.num_targets()).sum();
    let one = |seq: &TokenSeq, total: usize| -> Result<(f64, Vec<f64>)> {
        let fwd = policy.forward(seq)?;
        let rows = fwd.logits.rows();
        let (mean, mut dlogits) = cross_entropy(&fwd.logits.data, &fwd.logits.targets, &vec![true; rows])?;
        let w = rows as f64 / total as f64;
        dlogits.iter_mut().for_each(|g| *g *= w);
        let mut grads = policy.zero_grads();
        policy.backward(&fwd, &dlogits, &mut grads);
        Ok((mean * w, grads))
    };
    let (l_und, mut grads) = reduce_gradients(policy, pairs, |(u, _)| one(u, n_und))?;
    let (l_gen, g_gen) = reduce_gradients(policy, pairs, |(_, g)| one(g, n_gen))?;
    for (a, b) in grads.iter_mut().zip(&g_gen) {
        *a += b;
    }
    Ok((l_und, l_gen, grads))
}

/// One optimizer step on the summed understanding and generation losses.
pub fn sft_step(
    policy: &mut Policy,
    opt: &mut OptimState,
    batch: &[Scene],
    cfg: &SftConfig,
    step: u64,
) -> Result<SftStep> {
    if batch.is_empty() {
        return Err(Error::Contract("empty sft batch".into()));
    }
    let context = policy.config().context;
    let predicted = step >= cfg.predicted_conditioning_warmup;
    let mut pairs = Vec::with_capacity(batch.len());
    let mut conditioning = Vec::with_capacity(batch.len());
    for scene in batch {
        let img = rasterize(scene);
        let img_tokens = encode_image(&img);
        let gt_tokens = encode_layout(&scene.layout())?;
        let cond = if predicted {
            encode_layout(&predict_layout_greedy(policy, &img)?)?
        } else {
            gt_tokens.clone()
        };
        pairs.push((
            build_sequence(Direction::Und, &img_tokens, &gt_tokens, context)?,
            build_sequence(Direction::Gen, &img_tokens, &cond, context)?,
        ));
        conditioning.push(cond);
    }
    let (l_und, l_gen, grads) = supervised_loss(policy, &pairs)?;
    let losses = SftLosses { l_und, l_gen, l_sft: l_und + l_gen };
    if !(l_und.is_finite() && l_gen.is_finite()) {
        return Err(Error::NonFinite(format!(
            "sft loss at step {step}: l_und {l_und}, l_gen {l_gen}"
        )));
    }
    let report = adam_step(policy, &grads, opt, &ParamGroup::ALL, &cfg.adam(step))?;
    Ok(SftStep {
        losses,
        grad_norm: report.grad_norm,
        gen_conditioning: conditioning,
        predicted,
    })
}

#[derive(Serialize)]
struct SftRecord {
    l_und: f64,
    l_gen: f64,
    l_sft: f64,
    grad_norm: f64,
    lr: f64,
    conditioning: &'static str,
}

/// Where a run writes its outputs; absent paths are skipped.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains `policy` in place over seeded shuffled batches of `dataset`.
///
/// Metrics are averaged over each `log_every` window and tagged with the
/// 1-based step that closes it.
pub fn run_sft(
    policy: &mut Policy,
    opt: &mut OptimState,
    dataset: &[Scene],
    cfg: &SftConfig,
    outputs: &RunOutputs,
) -> Result<SftLosses> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("sft dataset is empty".into()));
    }
    let mut metrics = match &outputs.metrics {
        Some(p) => MetricsWriter::create(p, cfg.seed)?,
        None => MetricsWriter::discard(cfg.seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut window = (0.0, 0.0, 0.0, 0u64);
    let mut last = SftLosses { l_und: 0.0, l_gen: 0.0, l_sft: 0.0 };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let out = sft_step(policy, opt, &batch, cfg, step)?;
        last = out.losses;
        window.0 += out.losses.l_und;
        window.1 += out.losses.l_gen;
        window.2 += out.grad_norm;
        window.3 += 1;
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let n = window.3 as f64;
            let (l_und, l_gen) = (window.0 / n, window.1 / n);
            metrics.record(
                "sft",
                done,
                &SftRecord {
                    l_und,
                    l_gen,
                    l_sft: l_und + l_gen,
                    grad_norm: window.2 / n,
                    lr: cfg.lr_at(step),
                    conditioning: if out.predicted { "predicted" } else { "gt" },
                },
            )?;
            metrics.flush()?;
            window = (0.0, 0.0, 0.0, 0);
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &outputs.checkpoint) {
            if done % every == 0 && done != cfg.steps {
                save_checkpoint(policy, Some(opt), path)?;
            }
        }
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(policy, Some(opt), path)?;
    }
    metrics.flush()?;
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{sample_dataset, Difficulty, WorldConfig};

    fn tiny(zero_heads: bool) -> Policy {
        let cfg = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, zero_heads, ..ModelConfig::default() };
        Policy::new(cfg, 5).unwrap()
    }

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_dataset(&mut rng, 0, n, Difficulty::Simple, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn zero_heads_start_uniform() {
        let mut policy = tiny(true);
        let mut opt = OptimState::new(&policy);
        let cfg = SftConfig { steps: 10, predicted_conditioning_warmup: 5, ..SftConfig::default() };
        let out = sft_step(&mut policy, &mut opt, &scenes(3, 1), &cfg, 0).unwrap();
        let ln37 = 37f64.ln();
        assert!((out.losses.l_und - ln37).abs() < 1e-12);
        assert!((out.losses.l_gen - ln37).abs() < 1e-12);
        assert_eq!(out.losses.l_sft, out.losses.l_und + out.losses.l_gen);
    }

    #[test]
    fn conditioning_switches_at_warmup() {
        let mut policy = tiny(false);
        let mut opt = OptimState::new(&policy);
        let batch = scenes(2, 2);
        let cfg = SftConfig { steps: 10, predicted_conditioning_warmup: 3, ..SftConfig::default() };
        let before = sft_step(&mut policy, &mut opt, &batch, &cfg, 2).unwrap();
        for (cond, scene) in before.gen_conditioning.iter().zip(&batch) {
            assert_eq!(cond, &encode_layout(&scene.layout()).unwrap());
        }
        let probe = policy.clone();
        let after = sft_step(&mut policy, &mut opt, &batch, &cfg, 3).unwrap();
        assert!(after.predicted);
        for (cond, scene) in after.gen_conditioning.iter().zip(&batch) {
            let want = predict_layout_greedy(&probe, &rasterize(scene)).unwrap();
            assert_eq!(cond, &encode_layout(&want).unwrap());
        }
    }

    #[test]
    fn greedy_prediction_is_deterministic_and_parseable() {
        let policy = tiny(false);
        let img = rasterize(&scenes(1, 3)[0]);
        let a = predict_layout_greedy(&policy, &img).unwrap();
        assert_eq!(a, predict_layout_greedy(&policy, &img).unwrap());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = SftConfig { steps: 101, lr: 1e-2, lr_min: 1e-4, predicted_conditioning_warmup: 0, ..SftConfig::default() };
        assert!((cfg.lr_at(0) - 1e-2).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-15);
        assert!((cfg.lr_at(50) - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SftConfig { steps: 0, ..SftConfig::default() }.validate().is_err());
        assert!(SftConfig { steps: 100, predicted_conditioning_warmup: 101, ..SftConfig::default() }.validate().is_err());
        assert!(SftConfig { steps: 100, predicted_conditioning_warmup: 100, ..SftConfig::default() }.validate().is_ok());
        assert!(SftConfig::default().validate().is_ok());
    }
}
