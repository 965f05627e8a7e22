//! Sequence-to-sequence model: autodiff, transformer, training and decoding.

pub mod beam;
pub mod bleu;
pub mod checkpoint;
pub mod graph;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use beam::{beam_search, beam_search_with, greedy, token_choices, Hypothesis, TokenChoice};
pub use bleu::compute_bleu;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use tensor::Tensor;
pub use train::{train, EpochStats, Schedule, TrainConfig, TrainError, TrainReport};
pub use transformer::{Encoded, HybridDistribution, ModelConfig, ModelError, PreparedExample, Seq2Seq};
