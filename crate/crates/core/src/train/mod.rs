//! Synthetic tasks, optimization, the training loop and evaluation metrics.

pub mod bleu;
pub mod data;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use bleu::{bleu, corpus_stats, BleuStats};
pub use data::{Dataset, Example, SyntheticTask, TaskKind};
pub use eval::{evaluate, score, Metrics, Translate};
pub use optim::{adam_step, clip_global_norm, learning_rate, AdamConfig, TrainState};
pub use trainer::{batch_gradients, batch_indices, train, TrainConfig, TrainEvent};
