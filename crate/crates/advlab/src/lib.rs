//! advlab — a desk-scale adversarial-robustness laboratory for
//! spectrogram anti-spoofing.
//!
//! The crate covers the full experimental loop on synthetic data:
//!
//! * [`tensor`] — dense f64 tensors with reverse-mode autodiff on a
//!   per-call tape, plus SGD with momentum.
//! * [`data`] — a seeded synthetic spectrogram corpus whose bona-fide
//!   and spoofed classes differ in temporal modulation statistics.
//! * [`encoder`] — a small transformer encoder pretrained with masked
//!   frame prediction, used as a reconstruction-style front end.
//! * [`models`] — two compact CNN classifiers (max-feature-map and
//!   squeeze-excitation) over raw spectrograms or encoder features.
//! * [`attacks`] — L-infinity FGSM and PGD input-gradient attacks.
//! * [`defenses`] — smoothing filters and encoder front-end defenses
//!   assembled into comparable defender arms.
//! * [`diagnostics`] — layer-wise noise-to-signal ratios (LNSR) and
//!   accuracy-vs-epsilon robustness sweeps, written as CSV.
//! * [`harness`] — a manifest-driven pipeline runner behind the `lab`
//!   binary: data → pretrain → train → attack → evaluate → lnsr.
//!
//! Every stage is deterministic given the experiment seed; see
//! [`seeds`] for how per-stage seeds are derived.

// Modules land incrementally while the crate is under construction.
pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod diagnostics;
pub mod encoder;
mod error;
pub mod harness;
pub mod models;
pub mod seeds;
pub mod tensor;

pub use error::{LabError, Result};
