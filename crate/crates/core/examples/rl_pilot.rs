//! Calibration run for the RL defaults: continues a supervised checkpoint on
//! the standard 2000/200 simple-scene split and prints held-out rewards.
//!
//! `cargo run --release --example rl_pilot -- <checkpoint> <metrics_out> [config.json] [eval_every] [mode]`

use cyclegrpo::grpo::{train_rl, GrpoConfig, RlMode, RlOutputs};
use cyclegrpo::harness::eval::evaluate;
use cyclegrpo::harness::{load_checkpoint, Config};
use cyclegrpo::world::{sample_dataset, Difficulty};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cyclegrpo::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let (Some(ckpt), Some(metrics)) = (args.get(1), args.get(2)) else {
        eprintln!("usage: rl_pilot <checkpoint> <metrics_out> [config.json] [eval_every] [mode]");
        std::process::exit(2);
    };
    let cfg = match args.get(3).filter(|p| !p.is_empty()) {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let every: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(250);
    let mode = match args.get(5) {
        Some(m) => RlMode::ALL.into_iter().find(|x| x.as_str() == m).expect("mode: cycle, no-cycle, und-only or gen-only"),
        None => RlMode::Cycle,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = sample_dataset(&mut rng, 0, 2000, Difficulty::Simple, &cfg.world())?;
    let held = sample_dataset(&mut rng, 1_000_000, 200, Difficulty::Simple, &cfg.world())?;
    let (mut policy, _) = load_checkpoint(ckpt)?;
    let rl = GrpoConfig { eval_every: Some(every), ..cfg.grpo() };
    let before = evaluate(&policy, &held, &rl.weights)?.pooled;
    println!(
        "start r1 {:.4} r2 {:.4} und_iou {:.4} pixel_miou {:.4}",
        before.mean_r1, before.mean_r2, before.understanding.mean_iou, before.generation.pixel_miou
    );
    let outputs = RlOutputs { metrics: Some(metrics.into()), checkpoint: None };
    train_rl(&mut policy, &train, &held, &rl, mode, &outputs)?;
    Ok(())
}
