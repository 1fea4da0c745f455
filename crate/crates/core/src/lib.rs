//! Multimodal fake review detection: a transformer text encoder and a
//! residual CNN image encoder, fused by concatenation into a small
//! classification head, with the data, training and evaluation pipeline
//! around them. Everything is built on the small autodiff engine in
//! [`tensor`].

pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod image;
pub mod image_encoder;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod text_encoder;
pub mod train;

pub use error::{Error, Result};
