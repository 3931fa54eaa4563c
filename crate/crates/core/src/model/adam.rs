//! Adam with per-group step counters.

use serde::{Deserialize, Serialize};

use super::{ParamGroup, Policy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip over the updated groups; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments shaped like the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken per group, indexed Backbone, Und, Gen.
    pub steps: [u64; 3],
}

impl OptimState {
    pub fn new(policy: &Policy) -> Self {
        Self {
            m: vec![0.0; policy.num_params()],
            v: vec![0.0; policy.num_params()],
            steps: [0; 3],
        }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        self.steps[group.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Gradient norm over the updated groups before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam update of a slice at step `t` (1-based).
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
    grad_scale: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i] * grad_scale;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Updates only the tensors of `groups`; everything else (parameters and
/// moments) is left untouched. Non-finite gradients reject the whole step.
pub fn adam_step(
    policy: &mut Policy,
    grads: &[f64],
    state: &mut OptimState,
    groups: &[ParamGroup],
    cfg: &AdamConfig,
) -> Result<StepReport> {
    if grads.len() != policy.num_params() || state.m.len() != policy.num_params() {
        return Err(Error::Contract("gradient or moment buffers do not match the policy".into()));
    }
    if groups.is_empty() {
        return Err(Error::Contract("adam_step needs at least one parameter group".into()));
    }
    let arch = policy.arch.clone();
    let selected: Vec<_> = arch.specs.iter().filter(|s| groups.contains(&s.group)).collect();
    for spec in &selected {
        if let Some(i) = grads[spec.range()].iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at element {i} is {}; update rejected",
                spec.name,
                grads[spec.offset + i]
            )));
        }
    }
    let grad_norm = selected
        .iter()
        .flat_map(|s| grads[s.range()].iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    for g in ParamGroup::ALL {
        if groups.contains(&g) {
            state.steps[g.index()] += 1;
        }
    }
    for spec in selected {
        let t = state.steps[spec.group.index()];
        let r = spec.range();
        adam_update(
            &mut policy.params[r.clone()],
            &grads[r.clone()],
            &mut state.m[r.clone()],
            &mut state.v[r],
            t,
            cfg,
            scale,
        );
    }
    Ok(StepReport {
        grad_norm,
        clipped: scale != 1.0,
    })
}
