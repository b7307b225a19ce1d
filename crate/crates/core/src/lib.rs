//! Core library for an RGB + event-stream text recognizer.
//!
//! The pipeline: simulate events from rendered frame sequences, synthesize an
//! event frame, encode both modalities with twin transformer encoders, fuse
//! them through a k-NN hypergraph whose propagated features act as layer-wise
//! prompts, and decode characters with a permutation-trained autoregressive
//! head. Everything runs on plain `f64` buffers with a hand-rolled reverse-
//! mode tape — no external tensor or ML dependencies.

pub mod decoder;
pub mod encoder;
pub mod event;
pub mod hypergraph;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
