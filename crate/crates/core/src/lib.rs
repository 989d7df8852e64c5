//! Synchronous faithfulness monitoring and faithfulness-oriented decoding for
//! retrieval-augmented generation.
//!
//! The crate is organised around the life of a response:
//!
//! - [`trace`] holds the decoding trace data model, sentence segmentation,
//!   gold-label construction and the JSONL trace format.
//! - [`features`] turns one decoded sentence into the monitored signal vector
//!   (likelihood, entropy, local intrinsic dimension, contrastive KL and
//!   semantic alignment).
//! - [`aggregator`] trains and applies the logistic and MLP aggregators that
//!   map a signal vector to a faithfulness score in `[0, 1]`.
//! - [`backend`] abstracts sentence-granularity generation with dual
//!   (with/without context) token distributions, with a scripted mock LM and
//!   an HTTP client.
//! - [`fod`] contains the decoding strategies: greedy, faithfulness-oriented
//!   decoding with backtracking and pruned beam search, abstention and
//!   reranking.
//! - [`eval`] computes AUROC, faithfulness@L and benchmark grids.
//! - [`pipeline`] strings the pieces together: prompt files, corpus
//!   generation, reference activations and detector training.
//! - [`cli`] is the `synfaith` command line.

pub mod aggregator;
pub mod backend;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
mod http;
pub mod fod;
pub mod jsonl;
pub mod pipeline;
pub mod seed;
pub mod text;
pub mod trace;

pub use error::{Error, Result};
