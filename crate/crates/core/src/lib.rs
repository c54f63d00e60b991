//! Prototype-guided paraphrasing of task-oriented dialogue responses.
//!
//! A dialogue system that answers with hand-written templates is reliable but
//! monotonous. This crate rewrites such template responses: an encoder reads
//! the delexicalized template for its meaning, a second encoder summarizes the
//! dialogue context against a small bank of learned style prototypes, and a
//! third (training only) extracts a "paraphrasing noise" vector from the
//! ground-truth response so the decoder can be told which of several valid
//! surface forms to produce. At inference time that noise vector is replaced
//! by a sampled mixture of the learned response prototypes, which is what
//! makes repeated generations differ.
//!
//! The crate covers the full pipeline:
//!
//! * [`corpus`] — ingesting MultiWOZ-style dialogues into delexicalized
//!   records, grouping them into weakly-supervised paraphrase sets, and
//!   carving train/val/test splits.
//! * [`embedding`], [`rnn`], [`encoders`], [`decoder`] — the model itself,
//!   built on a small reverse-mode autodiff [`tape`] in `f64` so gradients
//!   can be checked against finite differences.
//! * [`training`] — losses, scheduled teacher forcing, noise dropout, Adam.
//! * [`inference`] — prototype-weight sampling and the beam-search baselines
//!   (plain, stochastic/Gumbel, diverse) used for comparison.
//! * [`metrics`] — Distinct-n and corpus BLEU over slot-aware token streams.
//! * [`synth`] — a deterministic synthetic corpus generator in the same
//!   format, used by tests and for smoke-testing the pipeline end to end.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rnn;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
