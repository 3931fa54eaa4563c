//! Flat JSON run configuration.
//!
//! Every tunable of the world, model, supervised and RL phases lives at the
//! top level; phase-specific names carry an `sft_` or `rl_` prefix. Missing
//! keys take their defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{Baseline, GrpoConfig, LossMode};
use crate::model::gradcheck::GradCheckConfig;
use crate::model::ModelConfig;
use crate::rewards::RewardWeights;
use crate::sft::SftConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_size: usize,
    pub max_size: usize,

    pub context: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
    pub zero_heads: bool,

    pub sft_steps: u64,
    pub sft_lr: f64,
    pub sft_lr_min: f64,
    pub sft_batch: usize,
    pub sft_predicted_conditioning_warmup: u64,
    pub sft_clip_norm: Option<f64>,
    pub sft_log_every: u64,
    pub sft_checkpoint_every: Option<u64>,

    pub rl_steps: u64,
    pub rl_lr: f64,
    pub rl_clip_norm: Option<f64>,
    pub rl_eval_every: Option<u64>,
    pub rl_checkpoint_every: Option<u64>,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub inner_epochs: usize,
    pub adv_eps: f64,
    pub baseline: Baseline,
    pub loss_mode: LossMode,
    pub interleave_und: usize,
    pub interleave_gen: usize,

    pub lambda_iou: f64,
    pub lambda_clip: f64,
    pub lambda_hps: f64,

    pub grad_check_samples: usize,
    pub grad_check_step: f64,
    pub grad_check_tolerance: f64,
    pub grad_check_floor: f64,
}

impl Default for Config {
    fn default() -> Self {
        let world = WorldConfig::default();
        let model = ModelConfig::default();
        let sft = SftConfig::default();
        let rl = GrpoConfig::default();
        let gc = GradCheckConfig::default();
        Self {
            seed: 0,
            min_boxes: world.min_boxes,
            max_boxes: world.max_boxes,
            min_size: world.min_size,
            max_size: world.max_size,
            context: model.context,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            d_ff: model.d_ff,
            init_std: model.init_std,
            zero_heads: model.zero_heads,
            sft_steps: sft.steps,
            sft_lr: sft.lr,
            sft_lr_min: sft.lr_min,
            sft_batch: sft.batch,
            sft_predicted_conditioning_warmup: sft.predicted_conditioning_warmup,
            sft_clip_norm: sft.clip_norm,
            sft_log_every: sft.log_every,
            sft_checkpoint_every: sft.checkpoint_every,
            rl_steps: rl.steps,
            rl_lr: rl.lr,
            rl_clip_norm: rl.clip_norm,
            rl_eval_every: rl.eval_every,
            rl_checkpoint_every: rl.checkpoint_every,
            group_size: rl.group_size,
            clip_eps: rl.clip_eps,
            kl_beta: rl.kl_beta,
            temperature: rl.temperature,
            inner_epochs: rl.inner_epochs,
            adv_eps: rl.adv_eps,
            baseline: rl.baseline,
            loss_mode: rl.loss_mode,
            interleave_und: rl.interleave_und,
            interleave_gen: rl.interleave_gen,
            lambda_iou: rl.weights.lambda_iou,
            lambda_clip: rl.weights.lambda_clip,
            lambda_hps: rl.weights.lambda_hps,
            grad_check_samples: gc.samples,
            grad_check_step: gc.step,
            grad_check_tolerance: gc.tolerance,
            grad_check_floor: gc.floor,
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.model().validate()?;
        self.sft().validate()?;
        self.grpo().validate()
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            min_boxes: self.min_boxes,
            max_boxes: self.max_boxes,
            min_size: self.min_size,
            max_size: self.max_size,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            context: self.context,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            init_std: self.init_std,
            zero_heads: self.zero_heads,
        }
    }

    pub fn sft(&self) -> SftConfig {
        SftConfig {
            steps: self.sft_steps,
            lr: self.sft_lr,
            lr_min: self.sft_lr_min,
            batch: self.sft_batch,
            predicted_conditioning_warmup: self.sft_predicted_conditioning_warmup,
            clip_norm: self.sft_clip_norm,
            log_every: self.sft_log_every,
            checkpoint_every: self.sft_checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_iou: self.lambda_iou,
            lambda_clip: self.lambda_clip,
            lambda_hps: self.lambda_hps,
        }
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            temperature: self.temperature,
            inner_epochs: self.inner_epochs,
            adv_eps: self.adv_eps,
            baseline: self.baseline,
            loss_mode: self.loss_mode,
            interleave_und: self.interleave_und,
            interleave_gen: self.interleave_gen,
            lr: self.rl_lr,
            clip_norm: self.rl_clip_norm,
            steps: self.rl_steps,
            weights: self.weights(),
            eval_every: self.rl_eval_every,
            checkpoint_every: self.rl_checkpoint_every,
            seed: self.seed,
        }
    }

    /// Gradient check on the checker's own small architecture; only the
    /// sampling and tolerance settings come from this file.
    pub fn grad_check(&self) -> GradCheckConfig {
        GradCheckConfig {
            samples: self.grad_check_samples,
            step: self.grad_check_step,
            tolerance: self.grad_check_tolerance,
            floor: self.grad_check_floor,
            seed: self.seed,
            ..GradCheckConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_json(r#"{"sft_stepz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sft_stepz"), "{err}");
    }

    #[test]
    fn fields_reach_components() {
        let cfg = Config::from_json(r#"{"seed": 4, "rl_lr": 0.001, "loss_mode": "reinforce-baseline", "sft_batch": 2}"#).unwrap();
        assert_eq!(cfg.grpo().lr, 0.001);
        assert_eq!(cfg.grpo().loss_mode, LossMode::ReinforceBaseline);
        assert_eq!(cfg.sft().batch, 2);
        assert_eq!(cfg.sft().seed, 4);
        assert_eq!(cfg.grpo().seed, 4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_json(r#"{"group_size": 1}"#).is_err());
        assert!(Config::from_json(r#"{"d_model": 30, "n_heads": 4}"#).is_err());
    }

    #[test]
    fn committed_default_config_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        assert_eq!(Config::load(path).unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = Config::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), cfg);
    }
}
