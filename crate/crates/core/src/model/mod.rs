//! Desk-scale multimodal network: frozen patch vision tower, two-layer MLP
//! projector, causal decoder LM with LoRA on the attention projections.
//!
//! Linear weights are stored `[out, in]`; adapters as `A: [r, in]`,
//! `B: [out, r]`, applied as `W·x + (alpha/r)·B·A·x`.

pub mod checkpoint;
mod config;
mod forward;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    assemble_context, assemble_labeled, patch_features, AssembledContext, Graph, Position, Segment,
    VisualTokens,
};
pub use state::{init_model, parse_groups, stage_label, ModelState, ParamGroup, Stage};
