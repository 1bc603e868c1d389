//! Multimodal ECG pretraining: synthetic and file-backed ECG data, retrieval
//! grounded description generation, signal and text encoders, a captioning
//! decoder, joint contrastive and captioning training, and downstream
//! evaluation.

pub mod benchmark;
pub mod cqa;
pub mod data_model;
pub mod downstream;
pub mod error;
pub mod model;
pub mod multimodal_decoder;
pub mod nn;
pub mod objectives;
pub mod pretrainer;
pub mod signal_encoder;
pub mod text_encoder;

pub use error::{Error, Result};
