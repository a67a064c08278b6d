//! Memorization auditing for CTC transcription models.
//!
//! Sped-up canary utterances are inserted into training data at several
//! repetition counts; after training, each canary's character error rate is
//! ranked against a holdout set drawn from the same distribution and turned
//! into an exposure score. Training runs inside a simulated data-parallel
//! layout with three gradient aggregation policies: plain averaging,
//! per-example clipping and per-core (micro-batch) clipping.

pub mod alphabet;
pub mod audit;
pub mod cli;
pub mod ctc;
pub mod digest;
pub mod error;
pub mod model;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
