//! Empathetic response generation on top of a pretrained encoder-decoder:
//! corpus preparation, the backbone with its sentiment head, the three
//! training objectives, finetuning, sampling-based decoding and evaluation.

pub mod backbone;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod objectives;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
