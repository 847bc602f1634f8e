//! Text-instructed unified binary and semantic change detection.
//!
//! A small causal language model reads an instruction and answers with task
//! tokens whose hidden states become mask queries for a token driven decoder
//! over dual-temporal visual features.

pub mod data_model;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod instruction_codec;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod token_decoder;
pub mod vision_encoder;

pub use error::{Error, Result};
