//! Multi-level contrastive learning for sequential recommendation.
//!
//! The crate builds four views of a behavior corpus (the ordered sequence, a
//! user-item bipartite graph, and user-user / item-item co-action graphs),
//! trains user and item embeddings with a sampled-softmax next-item loss plus
//! two cross-view InfoNCE terms, and evaluates top-N recommendation quality
//! using the sequence-only interest vector.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod graphs;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
