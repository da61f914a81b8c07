//! Two-stage optimization: masked SFT, then reference-free DPO.
//!
//! Both stages share one loop: seeded per-epoch shuffling, a linear
//! warm-up schedule, adaptive-moment updates with global-norm clipping at
//! 1.0, and a bitwise check of every frozen parameter after each epoch.

mod loss;
mod optim;
mod run;
mod schedule;

pub use loss::{
    advantage, advantage_graph, dpo_loss, dpo_loss_from_advantages, dpo_loss_graph, sft_loss, sft_loss_graph,
    DpoExample, SftExample,
};
pub use optim::{AdamW, OptimizerState};
pub use run::{
    sft_gradients, train_stage1, train_stage2, DpoConfig, EpochSummary, SftConfig, StepRecord, TrainLog,
};
pub use schedule::{lr_at, warmup_steps};
