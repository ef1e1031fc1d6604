//! Plug-in visual token compression for unified autoregressive models.
//!
//! The stack wraps an off-the-shelf discrete tokenizer with three lightweight
//! modules: a meta-query extractor that summarizes the dense token grid into a
//! few global tokens, an average-pooling compressor that shortens the local
//! stream, and a global-guided autoregressive decompressor that expands the
//! compact pair back to the dense grid. A small causal sequence model consumes
//! and emits the compact discrete wire format, and a benchmark harness
//! measures what the compression buys.

pub mod basetok;
pub mod bench;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod dataset;
pub mod decompressor;
pub mod error;
pub mod globals;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod optim;
pub mod pipeline;
pub mod pooling;
pub mod seqmodel;
pub mod tape;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
