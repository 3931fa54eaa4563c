//! Central-difference verification of the reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, BackwardFault, ModelConfig, Policy};
use crate::error::Result;
use crate::tokenizer::{build_sequence, encode_image, encode_layout, Direction, TokenSeq};
use crate::world::{rasterize, sample_scene, Difficulty, WorldConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared on an absolute
    /// scale (`|analytic - numeric| / floor`).
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            samples: 256,
            step: 1e-6,
            tolerance: 1e-6,
            floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks one element of every tensor, then fills up to `samples` uniformly.
fn sample_indices(policy: &Policy, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picks: Vec<usize> = policy
        .specs()
        .iter()
        .map(|s| s.offset + rng.random_range(0..s.len))
        .take(samples)
        .collect();
    while picks.len() < samples {
        picks.push(rng.random_range(0..policy.num_params()));
    }
    picks
}

/// Compares `objective`'s analytic gradient against central differences
/// at sampled coordinates.
pub fn check_objective<F>(policy: &Policy, objective: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Policy) -> Result<(f64, Vec<f64>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let (_, analytic) = objective(policy)?;
    let indices = sample_indices(policy, cfg.samples, &mut rng);
    let mut probe = policy.clone();
    let mut checks = Vec::with_capacity(indices.len());
    for idx in indices {
        let orig = probe.params[idx];
        probe.params[idx] = orig + cfg.step;
        let (up, _) = objective(&probe)?;
        probe.params[idx] = orig - cfg.step;
        let (down, _) = objective(&probe)?;
        probe.params[idx] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let name = policy
            .specs()
            .iter()
            .find(|s| s.range().contains(&idx))
            .map(|s| s.name.clone())
            .unwrap_or_default();
        checks.push(ParamCheck {
            name,
            index: idx,
            analytic: analytic[idx],
            numeric,
            rel_error: relative_error(analytic[idx], numeric, cfg.floor),
        });
    }
    let max = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let mean = checks.iter().map(|c| c.rel_error).sum::<f64>() / checks.len().max(1) as f64;
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(GradCheckReport {
        checked: checks.len(),
        max_rel_error: max,
        mean_rel_error: mean,
        worst,
        tolerance: cfg.tolerance,
        pass: max < cfg.tolerance,
    })
}

/// Summed cross-entropy of one understanding and one generation sequence.
pub fn supervised_objective(
    sequences: &[TokenSeq],
    fault: Option<BackwardFault>,
) -> impl Fn(&Policy) -> Result<(f64, Vec<f64>)> + '_ {
    move |policy: &Policy| {
        let mut total = 0.0;
        let mut grads = policy.zero_grads();
        for seq in sequences {
            let fwd = policy.forward(seq)?;
            let mask = vec![true; fwd.logits.rows()];
            let (loss, dlogits) = cross_entropy(&fwd.logits.data, &fwd.logits.targets, &mask)?;
            policy.backward_with_fault(&fwd, &dlogits, &mut grads, fault);
            total += loss;
        }
        Ok((total, grads))
    }
}

/// Probe sequences: both directions of one seeded regular-tier scene.
pub fn probe_sequences(seed: u64, context: usize) -> Result<Vec<TokenSeq>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(&mut rng, 0, Difficulty::Regular, &WorldConfig::default())?;
    let img = encode_image(&rasterize(&scene));
    let lay = encode_layout(&scene.layout())?;
    Ok(vec![
        build_sequence(Direction::Und, &img, &lay, context)?,
        build_sequence(Direction::Gen, &img, &lay, context)?,
    ])
}

/// Full check on a fresh policy with the supervised objective.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with_fault(cfg, None)
}

pub fn grad_check_with_fault(cfg: &GradCheckConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let policy = Policy::new(cfg.model.clone(), cfg.seed)?;
    let seqs = probe_sequences(cfg.seed, cfg.model.context)?;
    check_objective(&policy, supervised_objective(&seqs, fault), cfg)
}
