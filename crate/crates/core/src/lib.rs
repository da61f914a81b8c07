//! Two-stage fine-tuning of a small multimodal navigation assistant:
//! masked multi-turn supervised fine-tuning of a vision projector, then
//! reference-free preference optimization of LoRA adapters, plus the
//! semantic evaluation suite used to compare models.

pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod image;
pub mod model;
pub mod data;
pub mod train;
pub mod metrics;
pub mod cli;
