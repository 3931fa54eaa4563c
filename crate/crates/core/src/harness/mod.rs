//! Persistence, configuration, metrics, evaluation and rendering.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod render;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::Config;
pub use eval::{evaluate, BlankModel, CycleModel, EvalReport, OracleModel};
pub use metrics::{read_metrics, MetricsWriter};
pub use render::render_ppm;
