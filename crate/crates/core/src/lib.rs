//! Desk-scale laboratory for retrieval-enhanced and plain decoder transformers
//! with parameter-efficient fine-tuning.
//!
//! Modules, bottom up: [`autodiff`] (tape-based reverse mode over f64
//! tensors), [`model`] (decoder blocks, the plain decoder, checkpoints),
//! [`retro`] (neighbor encoder and chunked cross-attention), [`peft`]
//! (P-tuning, adapters, LoRA).

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod peft;
pub mod retrieval;
pub mod retro;

pub use error::{Error, Result};
