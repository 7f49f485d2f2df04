//! Non-intrusive intelligibility prediction for binaural hearing-aid
//! listeners.
//!
//! The pipeline splits a two-channel recording into ears, applies an
//! audiogram-driven hearing-loss simulation per ear, extracts spectral,
//! learnable filter-bank and embedding streams, and feeds them through a
//! two-branch CNN-BLSTM network with attention whose frame scores are fused
//! and averaged into an utterance score on a 0–100 scale.

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod hearing_loss;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
