//! Desk-scale CTR prediction lab built around a retrieval-oriented knowledge
//! base: a sample-level retrieval teacher over an inverted index, a neural
//! knowledge base distilled from it with imitation and stop-gradient
//! contrastive losses, plug-in integration of the resulting representations
//! into LR/MLP/FM backbones, and an inference-latency benchmark contrasting
//! the retrieval path with the knowledge-base path.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kb;
pub mod nn;
pub mod retrieval;
pub mod teacher;

pub use error::{Error, Result};
