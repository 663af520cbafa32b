//! Acoustic event detection with VGGish-family networks.
//!
//! The pipeline runs raw WAV audio through a 16 kHz log-mel front end
//! ([`audio`]), scores 96×64 patches with Aug-VGGish or FCN-VGGish
//! ([`model`], built on the operators in [`nn`]), fine-tunes a classifier
//! head on cached embeddings with k-fold cross-validation ([`transfer`]),
//! and turns per-second scores into detection events and precision-recall
//! curves ([`detect`], [`metrics`]).

pub mod audio;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
