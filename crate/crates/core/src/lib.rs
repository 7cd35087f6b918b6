//! Modulation classification from received I/Q frames.
//!
//! The crate covers the whole pipeline: synthetic frame generation under
//! multipath fading ([`dsp`], [`channel`], [`dataset`]), a small
//! reverse-mode differentiation engine ([`autodiff`]), the learnable
//! equalizer and the set-attention classifier ([`equalizer`],
//! [`classifier`]), the three-phase training protocol ([`training`]) and
//! classical references ([`baselines`]).
//!
//! Data-parallel loops (frame generation, per-frame gradients, batch
//! evaluation) go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

// `!(x > 0.0)` is used throughout config validation to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod classifier;
pub mod dataset;
pub mod dsp;
pub mod equalizer;
mod binio;
mod error;
pub mod parallel;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
