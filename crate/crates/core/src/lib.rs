//! Reversal-curse laboratory: synthetic corpora, semantic chunking,
//! permutation training of a small causal transformer and evaluation.

pub mod assistant;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod permute;
pub mod rng;
pub mod segment;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use corpus::{Dataset, DatasetSpec, Direction, EvalItem, Metric, TrainItem};
pub use eval::{MetricsTable, Prediction};
pub use model::{ModelConfig, ModelParams};
pub use permute::{OrderKind, PermutationPolicy};
pub use segment::{Backend, ChunkSeq, Sentence};
pub use tokenizer::{TokenId, Vocab};
pub use train::{Strategy, TrainConfig};
