//! Streaming voice-trigger (keyword-spotting) engine.
//!
//! The detector is a stack of S1DCNN units: a 1D convolution over the feature
//! dimension followed by a depth-wise 1D convolution over time. An SVDF layer
//! (low-rank factorization of a dense feature×time filter) is the special case
//! with zero biases, zero lookahead and an identity first-stage activation, and
//! the [`layers`] module carries that reduction plus equivalence checks.
//!
//! The crate covers the full desk-scale loop: MFCC frontend, frame-synchronous
//! streaming inference with configurable lookahead, training with Adam and a
//! two-stage learning-rate schedule, and DET-curve evaluation. Everything is
//! seeded and deterministic; with the default `parallel` feature the
//! data-parallel inner loops run on rayon, and without it the same code runs
//! sequentially with identical results.

// Indexed loops are the house style for the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod layers;
pub mod network;
pub mod numerics;
pub mod oracle;
pub(crate) mod parallel;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
