//! `cyclegrpo`: data generation, training, evaluation and rendering.
//!
//! Failures print one JSON object on stderr,
//! `{"error":{"kind":...,"message":...}}`, and exit with status 1. Bad
//! arguments use the kind `usage`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclegrpo::grpo::{train_rl, RlMode, RlOutputs};
use cyclegrpo::harness::ablation::run_ablation;
use cyclegrpo::harness::eval::{evaluate, generate_image_greedy};
use cyclegrpo::harness::{load_checkpoint, render_ppm, Config};
use cyclegrpo::model::gradcheck::grad_check;
use cyclegrpo::model::{OptimState, Policy};
use cyclegrpo::sft::{predict_layout_greedy, run_sft, RunOutputs};
use cyclegrpo::tokenizer::vocab_tsv;
use cyclegrpo::world::{dataset_read, dataset_write, rasterize, rasterize_boxes, sample_dataset, Difficulty};
use cyclegrpo::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cyclegrpo", version, about = "Cycle-consistent GRPO on a synthetic rectangle world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random stream of the command; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat JSON config file; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (1 gives byte-reproducible runs); defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tier {
    Simple,
    Regular,
    Complex,
    /// An equal share of every tier.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cycle,
    NoCycle,
    UndOnly,
    GenOnly,
}

impl From<Mode> for RlMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Cycle => RlMode::Cycle,
            Mode::NoCycle => RlMode::NoCycle,
            Mode::UndOnly => RlMode::UndOnly,
            Mode::GenOnly => RlMode::GenOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scene dataset as JSON lines.
    GenData {
        #[arg(long, value_enum)]
        tier: Tier,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Id of the first scene.
        #[arg(long, default_value_t = 0)]
        first_id: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised warm-up from a fresh policy.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reinforcement learning from a supervised checkpoint.
    Rl {
        #[arg(long)]
        sft_checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "cycle")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Held-out scenes for periodic evaluation (see `rl_eval_every`).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every RL mode from one checkpoint and compare them.
    Ablate {
        #[arg(long)]
        sft_checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        /// Directory for the JSON and markdown reports and metrics streams.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write PPM images of a dataset, or of a checkpoint's decodes on it.
    Render {
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        checkpoint: Option<PathBuf>,
        /// Scenes to draw directly; with --checkpoint, use --data instead.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Prompts for the checkpoint.
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long, default_value_t = 16)]
        limit: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the analytic gradients.
    GradCheck {
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the vocabulary table.
    Vocab {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Sft { common, .. }
            | Command::Rl { common, .. }
            | Command::Ablate { common, .. }
            | Command::Eval { common, .. }
            | Command::Render { common, .. }
            | Command::GradCheck { common, .. }
            | Command::Vocab { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&common)?;
    match cli.command {
        Command::GenData { tier, count, out, first_id, .. } => {
            let world = cfg.world();
            world.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let scenes = match tier {
                Tier::Simple => sample_dataset(&mut rng, first_id, count, Difficulty::Simple, &world)?,
                Tier::Regular => sample_dataset(&mut rng, first_id, count, Difficulty::Regular, &world)?,
                Tier::Complex => sample_dataset(&mut rng, first_id, count, Difficulty::Complex, &world)?,
                Tier::All => {
                    let mut all = Vec::with_capacity(count);
                    for (k, d) in Difficulty::ALL.into_iter().enumerate() {
                        let share = count / 3 + usize::from(k < count % 3);
                        let next = first_id + all.len() as u64;
                        all.extend(sample_dataset(&mut rng, next, share, d, &world)?);
                    }
                    all
                }
            };
            dataset_write(&out, &scenes)?;
            print_json(&serde_json::json!({ "scenes": scenes.len(), "out": out }))
        }
        Command::Sft { data, out, metrics, .. } => {
            let scenes = dataset_read(&data)?;
            let mut policy = Policy::new(cfg.model(), cfg.seed)?;
            let mut opt = OptimState::new(&policy);
            let outputs = RunOutputs { metrics, checkpoint: Some(out.clone()) };
            let last = run_sft(&mut policy, &mut opt, &scenes, &cfg.sft(), &outputs)?;
            print_json(&serde_json::json!({ "checkpoint": out, "final_step_losses": last }))
        }
        Command::Rl { sft_checkpoint, data, mode, out, metrics, eval_data, .. } => {
            let (mut policy, _) = load_checkpoint(&sft_checkpoint)?;
            let train = dataset_read(&data)?;
            let held = match eval_data {
                Some(p) => dataset_read(p)?,
                None => Vec::new(),
            };
            let outputs = RlOutputs { metrics, checkpoint: Some(out) };
            let summary = train_rl(&mut policy, &train, &held, &cfg.grpo(), mode.into(), &outputs)?;
            print_json(&summary)
        }
        Command::Ablate { sft_checkpoint, data, eval_data, out_dir, .. } => {
            let (policy, _) = load_checkpoint(&sft_checkpoint)?;
            let train = dataset_read(&data)?;
            let held = dataset_read(&eval_data)?;
            create_dir(&out_dir)?;
            let report = run_ablation(&policy, &train, &held, &cfg.grpo(), &RlMode::ALL, Some(&out_dir))?;
            write_text(&out_dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out_dir.join("ablation.md"), &report.to_markdown())?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::Eval { checkpoint, data, report, .. } => {
            let (policy, _) = load_checkpoint(&checkpoint)?;
            let scenes = dataset_read(&data)?;
            let r = evaluate(&policy, &scenes, &cfg.weights())?;
            write_text(&report, &serde_json::to_string_pretty(&r)?)?;
            print_json(&r.pooled)
        }
        Command::Render { checkpoint, dataset, data, out_dir, scale, limit, .. } => {
            create_dir(&out_dir)?;
            let mut written = 0;
            match (checkpoint, dataset) {
                (None, Some(ds)) => {
                    for scene in dataset_read(&ds)?.iter().take(limit) {
                        render_ppm(&rasterize(scene), out_dir.join(format!("scene_{:06}.ppm", scene.id)), scale)?;
                        written += 1;
                    }
                }
                (Some(ck), None) => {
                    let data = data.ok_or_else(|| Error::Config("render --checkpoint needs --data".into()))?;
                    let (policy, _) = load_checkpoint(&ck)?;
                    for scene in dataset_read(&data)?.iter().take(limit) {
                        let id = scene.id;
                        let target = rasterize(scene);
                        render_ppm(&target, out_dir.join(format!("scene_{id:06}_target.ppm")), scale)?;
                        let drawn = generate_image_greedy(&policy, &scene.layout())?;
                        render_ppm(&drawn, out_dir.join(format!("scene_{id:06}_generated.ppm")), scale)?;
                        let parsed = predict_layout_greedy(&policy, &target)?;
                        render_ppm(
                            &rasterize_boxes(&parsed.instances),
                            out_dir.join(format!("scene_{id:06}_parsed.ppm")),
                            scale,
                        )?;
                        written += 3;
                    }
                }
                _ => return Err(Error::Config("render needs exactly one of --checkpoint or --dataset".into())),
            }
            print_json(&serde_json::json!({ "images": written, "out_dir": out_dir }))
        }
        Command::GradCheck { tolerance, samples, .. } => {
            let mut gc = cfg.grad_check();
            if let Some(t) = tolerance {
                gc.tolerance = t;
            }
            if let Some(s) = samples {
                gc.samples = s;
            }
            let report = grad_check(&gc)?;
            print_json(&report)?;
            if report.pass {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: max relative error {:.3e} >= tolerance {:.1e}",
                    report.max_rel_error, report.tolerance
                )))
            }
        }
        Command::Vocab { out, .. } => write_text(&out, &vocab_tsv()),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
