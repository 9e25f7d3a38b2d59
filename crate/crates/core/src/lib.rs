//! EEG adapter pipeline.
//!
//! Raw multichannel EEG is converted to microvolts, notch and bandpass filtered,
//! cut into windows and brought onto the 23-channel layout of a transformer
//! encoder, either by explicit montage mapping (nearest electrode or composite
//! mixing) or by a learned temporal-convolution adapter trained jointly with the
//! encoder. Trained models are scored per sample, per subject and, through their
//! pooled embeddings, on classes never seen in training.

pub mod adapter;
pub mod bfm;
pub mod dsp;
pub mod error;
pub mod manifest;
pub mod matrix;
pub mod model;
pub mod montage;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod store;
pub mod synth;
pub mod train;
pub mod zeroshot;

pub use error::{EadError, Result};
pub use matrix::Matrix;
