//! Cross-modal sketch/photo matching with transformer encoders, swapped-query
//! cross-attention and a relation network over token-pair similarities.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod cross_attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod relation;
pub mod retrieval;
pub mod seed;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
