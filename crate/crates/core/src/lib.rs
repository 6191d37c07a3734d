//! Transformer models over synthetic life-event sequences: data generation,
//! tokenisation, pre-training, fine-tuning, evaluation and analysis.

pub mod baselines;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod heads;
pub mod interpret;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod persistence;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod space;
pub mod synthgen;
pub mod tokenizer;

pub use error::{Error, Result};
