//! Side-by-side comparison of RL modes started from one supervised policy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grpo::{train_rl, GrpoConfig, RlMode, RlOutputs, RlSummary};
use crate::harness::eval::{evaluate, EvalReport, TierReport};
use crate::model::Policy;
use crate::world::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: RlMode,
    pub summary: RlSummary,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rl_steps: u64,
    pub seed: u64,
    /// The starting policy, evaluated on the same held-out scenes.
    pub start: EvalReport,
    pub runs: Vec<AblationRun>,
}

/// Trains a copy of `start` under each mode with identical seeds and
/// evaluates every result on `held_out`. Per-mode metrics streams go to
/// `<metrics_dir>/rl_<mode>.jsonl` when a directory is given.
pub fn run_ablation(
    start: &Policy,
    train: &[Scene],
    held_out: &[Scene],
    cfg: &GrpoConfig,
    modes: &[RlMode],
    metrics_dir: Option<&Path>,
) -> Result<AblationReport> {
    let start_report = evaluate(start, held_out, &cfg.weights)?;
    let mut runs = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut policy = start.clone();
        let outputs = RlOutputs {
            metrics: metrics_dir.map(|d| d.join(format!("rl_{}.jsonl", mode.as_str()))),
            checkpoint: None,
        };
        let summary = train_rl(&mut policy, train, held_out, cfg, mode, &outputs)?;
        let report = evaluate(&policy, held_out, &cfg.weights)?;
        runs.push(AblationRun { mode, summary, report });
    }
    Ok(AblationReport {
        rl_steps: cfg.steps,
        seed: cfg.seed,
        start: start_report,
        runs,
    })
}

fn rows(t: &TierReport) -> Vec<(&'static str, Option<f64>)> {
    let u = &t.understanding;
    let g = &t.generation;
    vec![
        ("mean R1", Some(t.mean_r1)),
        ("mean R2", Some(t.mean_r2)),
        ("und mean IoU", Some(u.mean_iou)),
        ("und P@0.5", Some(u.at_50.precision)),
        ("und R@0.5", Some(u.at_50.recall)),
        ("und F1@0.5", Some(u.at_50.f1)),
        ("und P@0.75", Some(u.at_75.precision)),
        ("und R@0.75", Some(u.at_75.recall)),
        ("und F1@0.75", Some(u.at_75.f1)),
        ("und count error", Some(u.count_error)),
        ("gen pixel mIoU", Some(g.pixel_miou)),
        ("gen overlap mIoU", g.overlap_miou),
        ("gen hps proxy", Some(g.hps)),
        ("cycle mIoU", Some(g.cycle_miou)),
    ]
}

impl AblationReport {
    /// Markdown table of the pooled metrics, one column per run.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| metric | start |");
        for r in &self.runs {
            let _ = write!(out, " {} |", r.mode.as_str());
        }
        out.push('\n');
        out.push_str(&"|---".repeat(self.runs.len() + 2));
        out.push_str("|\n");
        let base = rows(&self.start.pooled);
        let cols: Vec<_> = self.runs.iter().map(|r| rows(&r.report.pooled)).collect();
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        for (i, (name, v)) in base.iter().enumerate() {
            let _ = write!(out, "| {name} | {} |", cell(*v));
            for c in &cols {
                let _ = write!(out, " {} |", cell(c[i].1));
            }
            out.push('\n');
        }
        out
    }
}
