//! Cycle-consistent training of a tiny unified autoregressive model that maps
//! images of rectangle scenes to layouts and layouts back to images.

pub mod error;
pub mod grpo;
pub mod harness;
pub mod model;
pub mod rewards;
pub mod sft;
pub mod tokenizer;
pub mod world;

pub use error::{Error, Result};
