//! A self-contained neural-operator laboratory.
//!
//! The crate bundles everything needed to study Fourier neural
//! operators next to the classical multigrid method on desk-scale
//! problems:
//!
//! * [`tensor`] — dense f64 tensors, FFTs of arbitrary length, and a
//!   tape-based reverse-mode differentiation engine.
//! * [`nn`] — trainable layers (pointwise linear, spectral convolution),
//!   activations including the compact-support bump, and Adam.
//! * [`operator`] — assembled models: plain FNO, the skip variant, and
//!   the multiscale FNO used on the finest training level.
//! * [`mg`] — geometric multigrid for 1-d/2-d Poisson-type systems:
//!   weighted Jacobi, transfer operators, V-cycles, direct solvers.
//! * [`data`] — Gaussian random fields, Burgers and Darcy ground-truth
//!   solvers, downsampling, and the bit-exact dataset container.
//! * [`mgfno`] — the three-level residual training scheme and the
//!   ensemble model it produces.
//! * [`analysis`] — frequency-domain diagnostics: per-band errors,
//!   the low-to-high frequency fitting experiment, resolution sweeps.

pub mod analysis;
pub mod data;
pub mod error;
pub mod mg;
pub mod mgfno;
pub mod nn;
pub mod operator;
pub mod tensor;

pub use error::{CoreError, Result};
