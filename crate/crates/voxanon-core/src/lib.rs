//! Emotion-preserving speaker anonymization at desk scale.
//!
//! The pipeline factorizes speech into three subspaces — speaker identity,
//! linguistic content, and emotion — with a residual vector-quantized
//! auto-encoder trained by supervised distillation, then swaps the speaker
//! identity vector for a pseudo-identity at inference time. A synthetic
//! corpus with known factor labels makes every disentanglement claim
//! checkable against ground truth, and a VPC-style harness reports
//! privacy (EER), content (token error rate), and emotion (UAR) metrics.
//!
//! Module map:
//! - [`signal`]: WAV I/O and the mel-spectrogram front-end.
//! - [`synthdata`]: synthetic labeled corpus and oracle teachers.
//! - [`nn`]: reverse-mode autodiff tape, layers, and AdamW.
//! - [`encoders`]: speech/speaker encoders, speaker subtraction, k-means.
//! - [`bottleneck`]: residual vector quantization.
//! - [`distill`]: factorized distillation losses and GRL adversaries.
//! - [`decoder`]: waveform decoder, discriminator, training objectives.
//! - [`model`] / [`train`]: parameter registry, full model, training loop.
//! - [`anonymizer`]: speaker vector pool and the anonymization strategy.
//! - [`eval`]: EER / UAR / TER metrics, probes, and the evaluation protocol.
//! - [`config`] / [`checkpoint`]: run configuration and model persistence.

pub mod anonymizer;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod distill;
pub mod encoders;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod synthdata;
pub mod train;

mod error;

pub use error::{Error, Result};
pub use signal::{MelConfig, MelSpectrogram, Waveform};
