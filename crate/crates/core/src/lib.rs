//! Spectral and self-supervised feature fusion for speech anti-spoofing.
//!
//! The crate covers the whole pipeline: signal processing and cepstral front
//! ends, a small reverse-mode autodiff engine, the fusion strategies and
//! classifier head built on it, training, evaluation, and file formats.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod head;
pub mod matrix;
pub mod model;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
pub use matrix::Matrix;
