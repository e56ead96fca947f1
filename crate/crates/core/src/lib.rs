//! Controllable image captioning over a synthetic scene corpus.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! seeded scene/caption generator with exact attribute annotators
//! ([`corpus`]), BLEU and CIDEr-D ([`metrics`]), the control-signal
//! conditioned two-LSTM attention decoder ([`captioner`]), a stacked
//! cross-attention image-text matcher ([`matcher`]), the training loops
//! ([`trainer`]) and the evaluation protocols ([`evaluator`]).

pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod matcher;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
