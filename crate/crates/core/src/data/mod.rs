//! Procedural corpus, manifests and image files.

pub mod corpus;
pub mod netpbm;
pub mod shapes;

pub use corpus::{check_zero_shot, generate_corpus, render_corpus, split_zero_shot, Corpus, GenerateSpec, SampleRecord, Split};
