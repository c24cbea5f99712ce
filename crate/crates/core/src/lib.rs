//! Answer-conditioned question generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a tape-based reverse-mode autodiff graph,
//!   recurrent layers, a linear-chain CRF, Adam and the checkpoint container.
//! - [`corpus`]: tokenization, vocabulary, entity dictionary, skip-gram
//!   embeddings and the synthetic fixture generator.
//! - [`detector`]: BM25 retrieval plus hierarchical-pooling phrase matching
//!   that yields per-phrase significance scores and keep/replace masks.
//! - [`typelab`]: Bi-LSTM-CRF word-type tagger and contextual phrase-type vectors.
//! - [`egcvae`]: the entity-guided conditional VAE with its three-pass decoder.
//! - [`generate`]: beam search and per-pair question regeneration.
//! - [`metrics`]: smoothed BLEU-3, bag-of-words embedding similarity and distinct-n.

pub mod corpus;
pub mod detector;
pub mod egcvae;
mod error;
pub mod generate;
pub mod metrics;
pub mod numerics;
pub mod typelab;

pub use error::{Error, Result};
