//! From-scratch guided-LSTM caption generation pipeline.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`numkit`]: dense linear algebra, nonlinearities and a
//!   symmetric-definite generalized eigensolver.
//! - [`textcorpus`]: tokenization, vocabulary, TF-IDF vectors and dataset
//!   ingestion (captions plus precomputed image features).
//! - [`cells`]: LSTM and guided-LSTM recurrent cells with analytic
//!   backpropagation through time.
//! - [`captioner`]: the full caption model, its log-likelihood loss,
//!   RMSProp training loop and checkpoint persistence.
//! - [`semspace`]: normalized CCA between image features and caption
//!   TF-IDF vectors, cosine retrieval, and the guidance-vector builders.
//! - [`decoder`]: beam search with pluggable length normalization, plus an
//!   exhaustive-search oracle for testing.
//! - [`metrics`]: corpus-level BLEU with brevity penalty.

mod hash;

pub mod captioner;
pub mod cells;
pub mod decoder;
pub mod metrics;
pub mod numkit;
pub mod semspace;
pub mod textcorpus;
