//! Rotary position embeddings and their long-context extensions, a causal
//! attention engine that keeps its weight matrices, a tiny trainable
//! transformer, attention entropy / Jensen-Shannon analysis, and
//! perplexity and needle-in-a-haystack harnesses.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod harness;
pub mod model;
pub mod report;
pub mod rope;
pub mod seed;
pub mod task;

mod linalg;

pub use attention::{attend, AttentionInput, AttentionMap, AttentionRecord};
pub use error::{Error, Result};
pub use model::{ModelConfig, TinyModel};
pub use rope::{HiddenVector, RopeConfig, RotaryVariant};
pub use task::{SyntheticTask, TaskKind, TrainingExample};
