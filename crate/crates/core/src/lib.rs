//! Story visualization with a memory-augmented context encoder, a
//! copy-transform generator and a frozen video-captioning dual network.

pub mod captioner;
pub mod config;
pub mod context_encoder;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod generator;
pub mod mart;
pub mod nn;
pub mod par;
pub mod text_encoder;
pub mod training;

pub use error::{Error, Result};
