//! Instruction tuning of a small decoder-only transformer with LoRA adapters
//! for financial named-entity recognition.
//!
//! The pipeline:
//!
//! 1. [`corpus`] loads annotated sentences and turns each one into an
//!    instruction / input / output triple whose output is an entity dictionary.
//! 2. [`tokenizer`] encodes triples into byte-level token ids with a loss mask
//!    covering only the output segment.
//! 3. [`model`] is a Llama-style transformer (RMSNorm, rotary positions,
//!    grouped-query attention, SwiGLU) with a hand-written backward pass.
//! 4. [`lora`] wraps the attention projections with trainable low-rank
//!    factors; [`trainer`] optimizes only those factors with AdamW.
//! 5. [`eval`] greedy-decodes dictionaries and scores them with micro and
//!    macro precision, recall and F1.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
