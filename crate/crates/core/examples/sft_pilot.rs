//! Calibration run for the supervised defaults: trains on simple scenes and
//! prints held-out quality at intervals.
//!
//! `cargo run --release --example sft_pilot -- <steps> <lr> <batch> <d_model> <layers> <warmup> <eval_every> <n_train> [checkpoint_out]`

use std::time::Instant;

use cyclegrpo::harness::checkpoint::save_checkpoint;
use cyclegrpo::harness::eval::evaluate;
use cyclegrpo::model::{ModelConfig, OptimState, Policy};
use cyclegrpo::rewards::RewardWeights;
use cyclegrpo::sft::{sft_step, SftConfig};
use cyclegrpo::world::{sample_dataset, Difficulty, WorldConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> cyclegrpo::Result<()> {
    let steps: u64 = arg(1, 2000);
    let lr: f64 = arg(2, 2e-3);
    let batch: usize = arg(3, 4);
    let d_model: usize = arg(4, 64);
    let n_layers: usize = arg(5, 4);
    let warmup: u64 = arg(6, steps / 5);
    let eval_every: u64 = arg(7, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let world = WorldConfig::default();
    let n_train: usize = arg(8, 2000);
    let train = sample_dataset(&mut rng, 0, n_train, Difficulty::Simple, &world)?;
    let held = sample_dataset(&mut rng, 10_000, 100, Difficulty::Simple, &world)?;
    let model = ModelConfig { d_model, n_layers, n_heads: 4, d_ff: 4 * d_model, ..ModelConfig::default() };
    let mut policy = Policy::new(model, 0)?;
    let mut opt = OptimState::new(&policy);
    let cfg = SftConfig { steps, lr, batch, predicted_conditioning_warmup: warmup, ..SftConfig::default() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let start = Instant::now();
    let mut acc = (0.0, 0.0, 0);
    for step in 0..steps {
        let batch: Vec<_> = (0..batch).map(|k| train[order[(step as usize * batch + k) % order.len()]].clone()).collect();
        let out = sft_step(&mut policy, &mut opt, &batch, &cfg, step)?;
        acc.0 += out.losses.l_und;
        acc.1 += out.losses.l_gen;
        acc.2 += 1;
        if (step + 1) % 50 == 0 {
            println!(
                "step {:5} l_und {:.4} l_gen {:.4} lr {:.2e} t {:.0}s",
                step + 1,
                acc.0 / acc.2 as f64,
                acc.1 / acc.2 as f64,
                cfg.lr_at(step),
                start.elapsed().as_secs_f64()
            );
            acc = (0.0, 0.0, 0);
        }
        if (step + 1) % eval_every == 0 || step + 1 == steps {
            let t = Instant::now();
            let r = evaluate(&policy, &held, &RewardWeights::default())?;
            println!(
                "EVAL step {} und_iou {:.4} pixel_miou {:.4} cycle {:.4} r1 {:.4} r2 {:.4} ({:.0}s)",
                step + 1,
                r.pooled.understanding.mean_iou,
                r.pooled.generation.pixel_miou,
                r.pooled.generation.cycle_miou,
                r.pooled.mean_r1,
                r.pooled.mean_r2,
                t.elapsed().as_secs_f64()
            );
        }
    }
    if let Some(path) = std::env::args().nth(9) {
        save_checkpoint(&policy, Some(&opt), path)?;
    }
    Ok(())
}
