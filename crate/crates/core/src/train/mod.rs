//! Episodic training: support/query sampling, AdamW, plateau scheduling,
//! early stopping on validation F1, and the training loop for every variant.

mod episode;
mod optim;
mod schedule;
mod trainer;

pub use episode::{sample_episode, Episode};
pub use optim::{adamw_update, AdamW, Moments};
pub use schedule::{EarlyStopping, ReduceOnPlateau};
pub use trainer::{log_to_jsonl, train, EpochLog, Splits, TrainConfig, TrainOutcome};
