//! Prototypical fine-tuning with low-rank adapters for rare-class text triage.
//!
//! A small transformer encoder with frozen base weights and trainable
//! low-rank adapters is trained episodically so that query embeddings cluster
//! around per-class prototypes. The trained model then ranks unlabeled
//! records by their probability of belonging to the rare positive class.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod proto;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
