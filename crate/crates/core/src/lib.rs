//! Multimodal prognostic question answering over a raw 12-lead ECG and a
//! structured health record, at desk scale.
//!
//! The pipeline: [`ehr`] renders the record as text, [`tokenizer`] maps it to
//! ids, [`ecg`] encodes the waveform into patch tokens, [`model`] projects
//! those into the decoder's embedding space and answers Yes/No questions,
//! [`training`] fits the model in two stages, [`synth`] generates cohorts
//! with planted signal and [`metrics`] scores the results.

pub mod config;
pub mod data;
pub mod ecg;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{CoreError, Result};
