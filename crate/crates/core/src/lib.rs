//! Shared-encoder / multi-decoder spectrogram source separation.
//!
//! The crate splits a stereo music mixture into vocals, drums, bass and
//! other stems. A single convolutional encoder feeds four source-specific
//! decoders. Training can interleave per-source databases (optionally
//! accumulating encoder gradients across the interleave cycle), optimize
//! all sources simultaneously from a joint database, or train four fully
//! independent networks as a baseline. Everything runs on the CPU with the
//! built-in tensor library; there is no external ML runtime.
//!
//! Module map:
//! - [`tensor`] — dense `f64` tensors, reverse-mode autodiff, ADAM.
//! - [`dsp`] — STFT front-end, magnitude spectrograms, per-bin
//!   normalization, patch extraction, mixture-phase reconstruction.
//! - [`model`] — the encoder/decoder stacks, width profiles, shape table.
//! - [`training`] — task databases, augmentation, the four regimes,
//!   early stopping.
//! - [`eval`] — SDR/SIR scoring via least-squares projections.
//! - [`data`] — WAV I/O, corpus scanning, synthetic corpus generation.
//! - [`checkpoint`] — binary model container shared by training and the CLI.
//! - [`separate`] — full-signal separation on top of a trained model.

pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod separate;
pub mod source;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use source::{PerSource, SourceId};
