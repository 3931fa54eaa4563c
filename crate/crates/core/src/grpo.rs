//! Group-relative policy optimization over both cycle directions.
//!
//! An understanding step samples `G` layouts for one image, redraws each
//! layout with the greedy generator, and scores the pair against the ground
//! truth (R1). A generation step samples `G` images for one layout, parses
//! each with the greedy understanding branch, and scores the parse plus the
//! image quality proxy (R2). Rewards are standardized within the group and
//! drive a clipped per-token surrogate with an exact KL penalty towards the
//! frozen reference policy. Each direction updates the shared backbone and
//! only its own output head.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::eval::{evaluate, generate_image_greedy};
use crate::harness::metrics::MetricsWriter;
use crate::model::{
    adam_step, restricted_log_softmax, sample_group, target_masks, AdamConfig, Decoding, OptimState, ParamGroup,
    Policy,
};
use crate::rewards::{hps_proxy, match_layouts, reward_r1, reward_r2, RewardBreakdown, RewardWeights};
use crate::sft::predict_layout_greedy;
use crate::tokenizer::{
    build_prompt, decode_image, decode_layout, encode_image, encode_layout, with_targets, DecodeMode, Direction,
    TokenId, TokenMask, TokenSeq, EOS, VOCAB_SIZE,
};
use crate::world::{rasterize, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Per-token importance ratios, each clipped.
    Clipped,
    /// One ratio per output: the product of its token ratios.
    ClippedSequence,
    /// `-(mean_t log pi) * (r - b)` without ratios or KL.
    ReinforceBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    GroupMean,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RlMode {
    /// Both directions, full R1 and R2.
    Cycle,
    /// Both directions, IoU-only understanding reward and quality-only
    /// generation reward.
    NoCycle,
    UndOnly,
    GenOnly,
}

impl RlMode {
    pub const ALL: [RlMode; 4] = [RlMode::Cycle, RlMode::NoCycle, RlMode::UndOnly, RlMode::GenOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            RlMode::Cycle => "cycle",
            RlMode::NoCycle => "no-cycle",
            RlMode::UndOnly => "und-only",
            RlMode::GenOnly => "gen-only",
        }
    }
}

impl std::str::FromStr for RlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RlMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown rl mode {s:?}; expected cycle, no-cycle, und-only or gen-only")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDirection {
    UndToGen,
    GenToUnd,
}

impl StepDirection {
    /// Which model direction produces the rollouts.
    pub fn rollout(self) -> Direction {
        match self {
            StepDirection::UndToGen => Direction::Und,
            StepDirection::GenToUnd => Direction::Gen,
        }
    }

    pub fn groups(self) -> [ParamGroup; 2] {
        match self {
            StepDirection::UndToGen => [ParamGroup::Backbone, ParamGroup::Und],
            StepDirection::GenToUnd => [ParamGroup::Backbone, ParamGroup::Gen],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub inner_epochs: usize,
    pub adv_eps: f64,
    pub baseline: Baseline,
    pub loss_mode: LossMode,
    /// Consecutive understanding steps per cycle of the schedule.
    pub interleave_und: usize,
    /// Consecutive generation steps per cycle of the schedule.
    pub interleave_gen: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub steps: u64,
    pub weights: RewardWeights,
    /// Held-out evaluation interval; `None` disables it.
    pub eval_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_eps: 0.2,
            kl_beta: 0.01,
            temperature: 1.0,
            inner_epochs: 1,
            adv_eps: 1e-8,
            baseline: Baseline::GroupMean,
            loss_mode: LossMode::Clipped,
            interleave_und: 1,
            interleave_gen: 1,
            lr: 1e-5,
            clip_norm: Some(1.0),
            steps: 1000,
            weights: RewardWeights::default(),
            eval_every: None,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0,1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be >= 1".into());
        }
        if !(self.adv_eps > 0.0) {
            return bad(format!("adv_eps must be > 0, got {}", self.adv_eps));
        }
        if self.interleave_und + self.interleave_gen == 0 {
            return bad("interleave ratio needs at least one step".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        self.weights.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    /// Direction of 0-based step `step` under `mode`.
    pub fn direction_at(&self, mode: RlMode, step: u64) -> StepDirection {
        match mode {
            RlMode::UndOnly => StepDirection::UndToGen,
            RlMode::GenOnly => StepDirection::GenToUnd,
            RlMode::Cycle | RlMode::NoCycle => {
                let period = (self.interleave_und + self.interleave_gen) as u64;
                if step % period < self.interleave_und as u64 {
                    StepDirection::UndToGen
                } else {
                    StepDirection::GenToUnd
                }
            }
        }
    }
}

/// `(r_i - mean) / (population std + eps)`; exactly zero for a group of
/// equal rewards.
pub fn advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!("advantages need a group of >= 2, got {}", rewards.len())));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r} in group")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(rho * a, clip(rho, 1 - eps, 1 + eps) * a)`, plus whether the
/// unclipped branch is the one selected (so the ratio carries gradient).
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// One sampled output of a rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Target tokens, ending with `EOS`.
    pub tokens: Vec<TokenId>,
    /// Per-token log-probabilities under the sampling policy.
    pub behavior_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub direction: StepDirection,
    pub prompt: TokenSeq,
    pub outputs: Vec<Candidate>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.outputs.iter().enumerate() {
            if c.tokens.len() != c.behavior_logprobs.len() || c.tokens.last() != Some(&EOS) {
                return Err(Error::Contract(format!("candidate {i} is malformed")));
            }
            if c.behavior_logprobs.iter().any(|lp| !(lp.is_finite() && *lp <= 0.0)) {
                return Err(Error::Contract(format!("candidate {i} has an invalid log-probability")));
            }
        }
        Ok(())
    }

    pub fn sequence(&self, i: usize) -> TokenSeq {
        with_targets(&self.prompt, self.direction.rollout(), &self.outputs[i].tokens)
    }
}

/// Logits of one candidate under the current and the reference policy,
/// row-aligned with its target tokens.
#[derive(Debug, Clone, Copy)]
pub struct CandidateRows<'a> {
    pub logits: &'a [f64],
    pub ref_logits: &'a [f64],
    pub masks: &'a [TokenMask],
    pub targets: &'a [TokenId],
    pub old_logprobs: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    /// Mean surrogate term (before negation), or the baseline objective.
    pub surrogate: f64,
    /// Mean per-token KL to the reference policy.
    pub kl: f64,
    /// Fraction of ratios on the clipped branch.
    pub clip_fraction: f64,
    pub max_ratio_dev: f64,
}

/// Group loss and its gradient with respect to every candidate's logits.
///
/// `rewards` is consulted only by the baseline mode; `adv` by the clipped
/// modes. Returns one `rows x VOCAB_SIZE` gradient buffer per candidate.
pub fn grpo_loss(
    rows: &[CandidateRows],
    adv: &[f64],
    rewards: &[f64],
    cfg: &GrpoConfig,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let g = rows.len();
    if g == 0 || adv.len() != g || rewards.len() != g {
        return Err(Error::Contract("group, advantage and reward sizes differ".into()));
    }
    let tau = cfg.temperature;
    let total_tokens: usize = rows.iter().map(|r| r.targets.len()).sum();
    let n_tok = total_tokens as f64;
    let baseline = match cfg.baseline {
        Baseline::GroupMean => rewards.iter().sum::<f64>() / g as f64,
        Baseline::Zero => 0.0,
    };

    // Per-token log-probs under the current and reference policies.
    struct Tok {
        lp: [f64; VOCAB_SIZE],
        lr: [f64; VOCAB_SIZE],
        kl: f64,
    }
    let mut toks: Vec<Vec<Tok>> = Vec::with_capacity(g);
    for (i, r) in rows.iter().enumerate() {
        let n = r.targets.len();
        if r.logits.len() != n * VOCAB_SIZE
            || r.ref_logits.len() != n * VOCAB_SIZE
            || r.masks.len() != n
            || r.old_logprobs.len() != n
        {
            return Err(Error::Contract(format!("candidate {i}: row buffers disagree in length")));
        }
        let mut v = Vec::with_capacity(n);
        for t in 0..n {
            let mask = &r.masks[t];
            let y = r.targets[t] as usize;
            if !mask[y] {
                return Err(Error::Contract(format!("candidate {i} token {t}: target outside the shared support")));
            }
            let lp = restricted_log_softmax(&r.logits[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE], mask, tau);
            let lr = restricted_log_softmax(&r.ref_logits[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE], mask, tau);
            let kl = (0..VOCAB_SIZE).filter(|&u| mask[u]).map(|u| lp[u].exp() * (lp[u] - lr[u])).sum();
            v.push(Tok { lp, lr, kl });
        }
        toks.push(v);
    }

    let mut grads: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.targets.len() * VOCAB_SIZE]).collect();
    // d loss / d log pi(y) for each token; filled per mode below.
    let mut dlogp: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.targets.len()]).collect();
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut ratios = 0usize;
    let mut max_dev: f64 = 0.0;
    let use_kl = cfg.loss_mode != LossMode::ReinforceBaseline && cfg.kl_beta > 0.0;

    match cfg.loss_mode {
        LossMode::Clipped => {
            for (i, r) in rows.iter().enumerate() {
                for t in 0..r.targets.len() {
                    let y = r.targets[t] as usize;
                    let ratio = (toks[i][t].lp[y] - r.old_logprobs[t]).exp();
                    max_dev = max_dev.max((ratio - 1.0).abs());
                    let (term, active) = clipped_surrogate(ratio, adv[i], cfg.clip_eps);
                    surrogate += term;
                    ratios += 1;
                    if active {
                        dlogp[i][t] = -ratio * adv[i] / n_tok;
                    } else {
                        clipped += 1;
                    }
                }
            }
            surrogate /= n_tok;
        }
        LossMode::ClippedSequence => {
            for (i, r) in rows.iter().enumerate() {
                let log_ratio: f64 = (0..r.targets.len())
                    .map(|t| toks[i][t].lp[r.targets[t] as usize] - r.old_logprobs[t])
                    .sum();
                let ratio = log_ratio.exp();
                max_dev = max_dev.max((ratio - 1.0).abs());
                let (term, active) = clipped_surrogate(ratio, adv[i], cfg.clip_eps);
                surrogate += term;
                ratios += 1;
                if active {
                    dlogp[i].iter_mut().for_each(|d| *d = -ratio * adv[i] / g as f64);
                } else {
                    clipped += 1;
                }
            }
            surrogate /= g as f64;
        }
        LossMode::ReinforceBaseline => {
            for (i, r) in rows.iter().enumerate() {
                let n = r.targets.len() as f64;
                let mean_lp: f64 = (0..r.targets.len()).map(|t| toks[i][t].lp[r.targets[t] as usize]).sum::<f64>() / n;
                let centered = rewards[i] - baseline;
                surrogate += mean_lp * centered;
                dlogp[i].iter_mut().for_each(|d| *d = -centered / (n * g as f64));
            }
            surrogate /= g as f64;
        }
    }

    let kl_mean = toks.iter().flatten().map(|t| t.kl).sum::<f64>() / n_tok;
    for (i, r) in rows.iter().enumerate() {
        for t in 0..r.targets.len() {
            let mask = &r.masks[t];
            let y = r.targets[t] as usize;
            let tok = &toks[i][t];
            let row = &mut grads[i][t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE];
            let d = dlogp[i][t];
            for u in 0..VOCAB_SIZE {
                if !mask[u] {
                    continue;
                }
                let p = tok.lp[u].exp();
                let mut gu = d * ((u == y) as u8 as f64 - p) / tau;
                if use_kl {
                    gu += cfg.kl_beta / n_tok * p * ((tok.lp[u] - tok.lr[u]) - tok.kl) / tau;
                }
                row[u] = gu;
            }
        }
    }
    let loss = -surrogate + if use_kl { cfg.kl_beta * kl_mean } else { 0.0 };
    Ok((
        LossParts {
            loss,
            surrogate,
            kl: kl_mean,
            clip_fraction: if ratios == 0 { 0.0 } else { clipped as f64 / ratios as f64 },
            max_ratio_dev: max_dev,
        },
        grads,
    ))
}

/// Per-token log-probabilities of every candidate under `policy`, computed
/// with the training forward pass.
pub fn candidate_logprobs(policy: &Policy, group: &RolloutGroup, temperature: f64) -> Result<Vec<Vec<f64>>> {
    let dir = group.direction.rollout();
    (0..group.outputs.len())
        .into_par_iter()
        .map(|i| {
            let fwd = policy.forward(&group.sequence(i))?;
            let masks = target_masks(dir, &group.outputs[i].tokens)?;
            Ok(masks
                .iter()
                .enumerate()
                .map(|(t, m)| restricted_log_softmax(fwd.logits.row(t), m, temperature)[fwd.logits.targets[t] as usize])
                .collect())
        })
        .collect()
}

/// Loss, its parameter gradient, and diagnostics for one group.
pub fn group_gradient(
    policy: &Policy,
    reference: &Policy,
    group: &RolloutGroup,
    old_logprobs: &[Vec<f64>],
    adv: &[f64],
    rewards: &[f64],
    cfg: &GrpoConfig,
) -> Result<(LossParts, Vec<f64>)> {
    let dir = group.direction.rollout();
    let g = group.outputs.len();
    let traced: Vec<_> = (0..g)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let seq = group.sequence(i);
            let fwd = policy.forward(&seq)?;
            let reff = reference.forward(&seq)?;
            let masks = target_masks(dir, &group.outputs[i].tokens)?;
            Ok((fwd, reff.logits.data, masks))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CandidateRows> = traced
        .iter()
        .enumerate()
        .map(|(i, (fwd, ref_logits, masks))| CandidateRows {
            logits: &fwd.logits.data,
            ref_logits,
            masks,
            targets: &group.outputs[i].tokens,
            old_logprobs: &old_logprobs[i],
        })
        .collect();
    let (parts, dlogits) = grpo_loss(&rows, adv, rewards, cfg)?;
    let partial: Vec<Vec<f64>> = traced
        .par_iter()
        .zip(&dlogits)
        .map(|((fwd, _, _), dl)| {
            let mut grads = policy.zero_grads();
            policy.backward(fwd, dl, &mut grads);
            grads
        })
        .collect();
    let mut grads = policy.zero_grads();
    for p in partial {
        for (a, b) in grads.iter_mut().zip(&p) {
            *a += b;
        }
    }
    Ok((parts, grads))
}

/// Which reward terms a step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardScope {
    /// R1 for understanding rollouts, R2 for generation rollouts.
    Cycle,
    /// Layout IoU only for understanding, image quality only for generation.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub direction: StepDirection,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub mean_reward: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// All rewards equal, so the advantages vanish.
    pub degenerate: bool,
    /// No parameter changed because every gradient was exactly zero.
    pub skipped: bool,
}

fn rollout<R: Rng + ?Sized>(
    policy: &Policy,
    direction: StepDirection,
    prompt: TokenSeq,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let decoding = Decoding::Sample { temperature: cfg.temperature };
    let samples = sample_group(policy, &prompt, direction.rollout(), decoding, cfg.group_size, rng)?;
    let group = RolloutGroup {
        direction,
        prompt,
        outputs: samples
            .into_iter()
            .map(|s| Candidate { tokens: s.tokens, behavior_logprobs: s.logprobs })
            .collect(),
    };
    group.validate()?;
    Ok(group)
}

/// Scores one group; the inner decode of each candidate is greedy and
/// uses the pre-update policy.
pub fn score_group(
    policy: &Policy,
    scene: &Scene,
    group: &RolloutGroup,
    scope: RewardScope,
    w: &RewardWeights,
) -> Result<Vec<RewardBreakdown>> {
    let gt_layout = scene.layout();
    let gt_img = rasterize(scene);
    group
        .outputs
        .par_iter()
        .map(|c| match group.direction {
            StepDirection::UndToGen => {
                let pred = decode_layout(&c.tokens, DecodeMode::Strict)?;
                match scope {
                    RewardScope::Cycle => {
                        let img = generate_image_greedy(policy, &pred)?;
                        reward_r1(&pred, &gt_layout, &img, &gt_img, w)
                    }
                    RewardScope::Direct => {
                        let iou = match_layouts(&pred, &gt_layout)?.mean_iou;
                        Ok(RewardBreakdown::new(Some(iou), None, None, w))
                    }
                }
            }
            StepDirection::GenToUnd => {
                let cells = c.tokens.strip_suffix(&[EOS]).unwrap_or(&c.tokens);
                let img = decode_image(cells)?;
                match scope {
                    RewardScope::Cycle => {
                        let parsed = predict_layout_greedy(policy, &img)?;
                        reward_r2(&parsed, &gt_layout, &img, w)
                    }
                    RewardScope::Direct => Ok(RewardBreakdown::new(None, None, Some(hps_proxy(&img)), w)),
                }
            }
        })
        .collect()
}

/// Rollout, scoring, and `inner_epochs` updates of the direction's groups.
#[allow(clippy::too_many_arguments)]
pub fn rl_step<R: Rng + ?Sized>(
    policy: &mut Policy,
    reference: &Policy,
    opt: &mut OptimState,
    scene: &Scene,
    direction: StepDirection,
    scope: RewardScope,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let prompt = match direction {
        StepDirection::UndToGen => build_prompt(Direction::Und, &encode_image(&rasterize(scene))),
        StepDirection::GenToUnd => build_prompt(Direction::Gen, &encode_layout(&scene.layout())?),
    };
    let group = rollout(policy, direction, prompt, cfg, rng)?;
    let breakdowns = score_group(policy, scene, &group, scope, &cfg.weights)?;
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let adv = advantages(&rewards, cfg.adv_eps)?;
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let old = candidate_logprobs(policy, &group, cfg.temperature)?;
    let mut last = None;
    let mut skipped = true;
    let mut grad_norm = 0.0;
    for _ in 0..cfg.inner_epochs {
        let (parts, grads) = group_gradient(policy, reference, &group, &old, &adv, &rewards, cfg)?;
        if grads.iter().any(|g| *g != 0.0) {
            let report = adam_step(policy, &grads, opt, &direction.groups(), &cfg.adam())?;
            grad_norm = report.grad_norm;
            skipped = false;
        }
        last = Some(parts);
    }
    let parts = last.expect("inner_epochs >= 1");
    Ok(StepMetrics {
        direction,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        rewards: breakdowns,
        advantages: adv,
        loss: parts.loss,
        kl: parts.kl,
        clip_fraction: parts.clip_fraction,
        grad_norm,
        degenerate,
        skipped,
    })
}

/// Understanding-to-generation step under full cycle rewards.
pub fn step_und_to_gen<R: Rng + ?Sized>(
    policy: &mut Policy,
    reference: &Policy,
    opt: &mut OptimState,
    scene: &Scene,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    rl_step(policy, reference, opt, scene, StepDirection::UndToGen, RewardScope::Cycle, cfg, rng)
}

/// Generation-to-understanding step under full cycle rewards.
pub fn step_gen_to_und<R: Rng + ?Sized>(
    policy: &mut Policy,
    reference: &Policy,
    opt: &mut OptimState,
    scene: &Scene,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    rl_step(policy, reference, opt, scene, StepDirection::GenToUnd, RewardScope::Cycle, cfg, rng)
}

#[derive(Serialize)]
struct RlRecord<'a> {
    mode: &'static str,
    #[serde(flatten)]
    step: &'a StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSummary {
    pub mode: RlMode,
    pub und_steps: u64,
    pub gen_steps: u64,
    pub degenerate_steps: u64,
    pub mean_reward_und: f64,
    pub mean_reward_gen: f64,
}

/// Where an RL run writes its outputs; absent paths are skipped.
#[derive(Debug, Clone, Default)]
pub struct RlOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains `policy` in place. The reference policy is the state on entry;
/// one random training scene is drawn per step from a seeded stream.
pub fn train_rl(
    policy: &mut Policy,
    train: &[Scene],
    held_out: &[Scene],
    cfg: &GrpoConfig,
    mode: RlMode,
    outputs: &RlOutputs,
) -> Result<RlSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("rl dataset is empty".into()));
    }
    let reference = policy.clone();
    let mut opt = OptimState::new(policy);
    let mut metrics = match &outputs.metrics {
        Some(p) => MetricsWriter::create(p, cfg.seed)?,
        None => MetricsWriter::discard(cfg.seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scope = match mode {
        RlMode::NoCycle => RewardScope::Direct,
        _ => RewardScope::Cycle,
    };
    let mut summary = RlSummary {
        mode,
        und_steps: 0,
        gen_steps: 0,
        degenerate_steps: 0,
        mean_reward_und: 0.0,
        mean_reward_gen: 0.0,
    };
    for step in 0..cfg.steps {
        let scene = &train[rng.random_range(0..train.len())];
        let direction = cfg.direction_at(mode, step);
        let m = rl_step(policy, &reference, &mut opt, scene, direction, scope, cfg, &mut rng)?;
        match direction {
            StepDirection::UndToGen => {
                summary.und_steps += 1;
                summary.mean_reward_und += m.mean_reward;
            }
            StepDirection::GenToUnd => {
                summary.gen_steps += 1;
                summary.mean_reward_gen += m.mean_reward;
            }
        }
        summary.degenerate_steps += m.degenerate as u64;
        metrics.record("rl", step + 1, &RlRecord { mode: mode.as_str(), step: &m })?;
        if let Some(every) = cfg.eval_every {
            if (step + 1) % every == 0 && !held_out.is_empty() {
                // Evaluation problems are reported in the stream, not fatal.
                match evaluate(&*policy, held_out, &cfg.weights) {
                    Ok(report) => metrics.record("rl_eval", step + 1, &report.pooled)?,
                    Err(e) => metrics.record("rl_eval", step + 1, &serde_json::json!({ "error": e.to_string() }))?,
                }
            }
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &outputs.checkpoint) {
            if (step + 1) % every == 0 && step + 1 != cfg.steps {
                save_checkpoint(policy, Some(&opt), path)?;
            }
        }
    }
    summary.mean_reward_und /= summary.und_steps.max(1) as f64;
    summary.mean_reward_gen /= summary.gen_steps.max(1) as f64;
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(policy, Some(&opt), path)?;
    }
    metrics.flush()?;
    Ok(summary)
}
