//! Socially-enriched language model pre-training, end to end at desk scale:
//! engagement-graph embedding, similar-pair mining via a quantized index,
//! joint contrastive + masked-language pre-training, and downstream
//! evaluation, all reproducible from a single seed.

pub mod binio;
pub mod downstream;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod index;
pub mod pipeline;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
