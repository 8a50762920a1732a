//! Shapley-guided adversarial defense for automatic modulation
//! classification.
//!
//! The crate covers the full experimental loop on synthetic IQ data:
//!
//! - [`signal`] generates labeled IQ frames through a fading channel with
//!   AWGN and writes/reads the binary corpus format;
//! - [`autodiff`] is a small reverse-mode engine whose input gradients power
//!   both attack synthesis and attribution;
//! - [`nets`] defines and trains the modulation classifier and the attack
//!   detector;
//! - [`attacks`] crafts white-box adversarial frames (FGSM, BIM, PGD, C&W);
//! - [`attribution`] estimates per-sample-point Shapley values with
//!   integrated and expected gradients and selects destructive positions;
//! - [`defense`] routes frames through detection, excises destructive
//!   positions, fine-tunes a fresh classifier, and reports routing-weighted
//!   accuracy;
//! - [`harness`] drives deterministic experiments from one config file and
//!   renders CSV/SVG reports.
//!
//! The `shap-aft` binary exposes each stage as a subcommand; the crate's
//! `examples/` directory shows the library API for every major capability.

pub mod attacks;
pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod defense;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nets;
pub mod seeds;
pub mod signal;
pub mod smoothing;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
