//! Episodic LoRA test-time training for a miniature CLIP-style classifier.
//!
//! The crate is split the way the pipeline runs:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and AdamW.
//! - [`encoder`]: ViT image encoder, text encoder, cosine classifier,
//!   contrastive loss and the checkpoint/text-table formats.
//! - [`lora`]: low-rank adapters on attention projections.
//! - [`views`]: augmented views and patch masks for one test image.
//! - [`ttt`]: test-time losses, confidence selection and the episode engine.
//! - [`metrics`]: accuracy, expected calibration error, resource accounting.
//! - [`bench`]: synthetic shifted datasets, base pretraining and persistence.

pub mod bench;
pub mod encoder;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod ttt;
pub mod views;

pub use error::{Error, Result};
