//! Denoising encoder-decoder models over visit-structured diagnosis-code
//! histories.
//!
//! The crate is `no_std` (it needs `alloc`) and carries the whole algorithmic
//! pipeline: cohort types and tokenization ([`corpus`]), a synthetic cohort
//! generator with planted, oracle-computable signal ([`synthgen`]), the four
//! history corruption schemes ([`noising`]), a small reverse-mode autodiff
//! engine ([`autodiff`]), the encoder-decoder network ([`model`]), training
//! loops ([`training`]), decoding and baselines ([`inference`]) and the
//! evaluation metrics ([`metrics`]).
//!
//! File formats, checkpoints on disk and the command line live in the
//! `decode-lab` companion crate.
#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod noising;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
