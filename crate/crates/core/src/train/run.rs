use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{advantage, dpo_loss_graph, sft_loss_graph, DpoExample, SftExample};
use super::optim::{AdamW, OptimizerState};
use super::schedule::lr_at;
use crate::diffcore::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{stage_label, Graph, ModelState, ParamGroup, Stage};

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the projector-only default (ablation rows).
    pub trainable: Option<BTreeSet<ParamGroup>>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 20,
            peak_lr: 5e-5,
            warmup_ratio: 0.03,
            batch_size: 4,
            seed: 0,
            trainable: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the LoRA-only default.
    pub trainable: Option<BTreeSet<ParamGroup>>,
    /// Extension, off by default: measure advantages relative to a frozen
    /// snapshot of the incoming model.
    pub reference_mode: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            epochs: 5,
            peak_lr: 5e-5,
            warmup_ratio: 0.03,
            batch_size: 4,
            seed: 0,
            trainable: None,
            reference_mode: false,
        }
    }
}

fn check_common(epochs: usize, peak_lr: f64, warmup_ratio: f64, batch_size: usize) -> Result<()> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    if !(peak_lr > 0.0 && peak_lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("peak_lr must be > 0, got {peak_lr}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::InvalidConfig(format!("warmup_ratio {warmup_ratio} not in [0, 1)")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    Ok(())
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.epochs, self.peak_lr, self.warmup_ratio, self.batch_size)
    }

    pub fn stage(&self) -> Stage {
        self.trainable.clone().map_or(Stage::SftDefault, Stage::Custom)
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.epochs, self.peak_lr, self.warmup_ratio, self.batch_size)?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn stage(&self) -> Stage {
        self.trainable.clone().map_or(Stage::DpoDefault, Stage::Custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_advantage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_advantage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// e.g. `SFT(projector)`.
    pub label: String,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    /// Steps strictly increasing and losses finite.
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::invalid("log steps not strictly increasing"));
            }
        }
        if let Some(r) = self.records.iter().find(|r| !r.loss.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {}", r.step)));
        }
        Ok(())
    }

    /// One JSON object per step followed by a terminal summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "label": self.label,
                "steps": self.records.len(),
                "final_loss": self.final_loss(),
                "epochs": self.epochs,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Bit patterns of every frozen parameter, for the per-epoch freeze check.
fn frozen_snapshot(state: &ModelState) -> BTreeMap<String, Vec<u64>> {
    state
        .params()
        .iter()
        .filter(|(n, _)| !state.is_trainable(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn verify_frozen(state: &ModelState, snap: &BTreeMap<String, Vec<u64>>) -> Result<()> {
    for (n, bits) in snap {
        let same = state.params()[n].data().iter().map(|x| x.to_bits()).eq(bits.iter().copied());
        if !same {
            return Err(Error::FreezeViolation(n.clone()));
        }
    }
    Ok(())
}

struct StepOutcome {
    loss: f64,
    grads: Gradients,
    mean_advantage: Option<f64>,
}

struct LoopJob<'a> {
    stage: &'static str,
    epochs: usize,
    peak_lr: f64,
    warmup_ratio: f64,
    batch_size: usize,
    seed: u64,
    n: usize,
    step_fn: &'a dyn Fn(&ModelState, &[usize]) -> Result<StepOutcome>,
}

fn run_loop(mut state: ModelState, job: LoopJob) -> Result<(ModelState, TrainLog)> {
    let snap = frozen_snapshot(&state);
    let mut opt = OptimizerState::new(&state, AdamW::default());
    let per_epoch = job.n.div_ceil(job.batch_size);
    let total = job.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut order: Vec<usize> = (0..job.n).collect();
    let label = stage_label(&job.stage.to_uppercase(), &state.trainable_groups());
    let mut log = TrainLog {
        label,
        records: Vec::with_capacity(total),
        epochs: Vec::with_capacity(job.epochs),
    };
    let mut step = 0;
    for epoch in 0..job.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut adv_sum, mut adv_n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(job.batch_size) {
            let out = (job.step_fn)(&state, chunk)?;
            let lr = lr_at(step + 1, total, job.warmup_ratio, job.peak_lr)?;
            opt.step(&mut state, &out.grads, lr)?;
            step += 1;
            loss_sum += out.loss;
            if let Some(a) = out.mean_advantage {
                adv_sum += a * chunk.len() as f64;
                adv_n += chunk.len();
            }
            log.records.push(StepRecord {
                stage: job.stage.into(),
                epoch,
                step,
                lr,
                loss: out.loss,
                mean_advantage: out.mean_advantage,
            });
        }
        verify_frozen(&state, &snap)?;
        log.epochs.push(EpochSummary {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            mean_advantage: (adv_n > 0).then(|| adv_sum / adv_n as f64),
        });
    }
    log.validate()?;
    Ok((state, log))
}

/// Masked SFT. Applies the stage's freeze mask, shuffles per epoch with
/// `cfg.seed`, and verifies frozen parameters bitwise after every epoch.
pub fn train_stage1(examples: &[SftExample], mut state: ModelState, cfg: &SftConfig) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("SFT corpus is empty"));
    }
    state.set_stage_trainable(&cfg.stage())?;
    let step_fn = |s: &ModelState, idx: &[usize]| -> Result<StepOutcome> {
        let batch: Vec<SftExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape)?;
        let g = Graph::new(&s.config, &vars);
        let loss = sft_loss_graph(&mut tape, &g, &batch)?;
        Ok(StepOutcome {
            loss: tape.value(loss).item(),
            grads: tape.backward(loss)?,
            mean_advantage: None,
        })
    };
    run_loop(
        state,
        LoopJob {
            stage: "sft",
            epochs: cfg.epochs,
            peak_lr: cfg.peak_lr,
            warmup_ratio: cfg.warmup_ratio,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            n: examples.len(),
            step_fn: &step_fn,
        },
    )
}

/// Reference-free DPO on the adapters (by default) of a stage-1 model.
pub fn train_stage2(examples: &[DpoExample], mut state: ModelState, cfg: &DpoConfig) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("DPO pair set is empty"));
    }
    if !state.has_adapters() {
        return Err(Error::invalid("stage-2 model carries no LoRA adapters"));
    }
    state.set_stage_trainable(&cfg.stage())?;
    let reference: Option<Vec<f64>> = if cfg.reference_mode {
        Some(examples.iter().map(|e| advantage(&state, e)).collect::<Result<_>>()?)
    } else {
        None
    };
    let beta = cfg.beta;
    let step_fn = |s: &ModelState, idx: &[usize]| -> Result<StepOutcome> {
        let batch: Vec<DpoExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let refs: Option<Vec<f64>> = reference.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect());
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape)?;
        let g = Graph::new(&s.config, &vars);
        let (loss, advs) = dpo_loss_graph(&mut tape, &g, &batch, beta, refs.as_deref())?;
        let mean_adv = advs.iter().map(|&a| tape.value(a).item()).sum::<f64>() / advs.len() as f64;
        Ok(StepOutcome {
            loss: tape.value(loss).item(),
            grads: tape.backward(loss)?,
            mean_advantage: Some(mean_adv),
        })
    };
    run_loop(
        state,
        LoopJob {
            stage: "dpo",
            epochs: cfg.epochs,
            peak_lr: cfg.peak_lr,
            warmup_ratio: cfg.warmup_ratio,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            n: examples.len(),
            step_fn: &step_fn,
        },
    )
}

/// Mean loss and gradient of the full SFT objective (handy for checks).
pub fn sft_gradients(state: &ModelState, examples: &[SftExample]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape)?;
    let g = Graph::new(&state.config, &vars);
    let loss = sft_loss_graph(&mut tape, &g, examples)?;
    Ok((tape.value(loss).item(), tape.backward(loss)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = SftConfig::default();
        assert_eq!((s.epochs, s.peak_lr, s.warmup_ratio), (20, 5e-5, 0.03));
        let d = DpoConfig::default();
        assert_eq!((d.epochs, d.beta, d.reference_mode), (5, 0.1, false));
        assert_eq!(s.stage(), Stage::SftDefault);
        assert_eq!(d.stage(), Stage::DpoDefault);
    }

    #[test]
    fn invalid_configs() {
        assert!(SftConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(SftConfig { warmup_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(DpoConfig { beta: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn log_roundtrip_and_validation() {
        let log = TrainLog {
            label: "SFT(projector)".into(),
            records: vec![
                StepRecord { stage: "sft".into(), epoch: 0, step: 1, lr: 0.0, loss: 1.0, mean_advantage: None },
                StepRecord { stage: "sft".into(), epoch: 0, step: 2, lr: 1.0, loss: 0.5, mean_advantage: None },
            ],
            epochs: vec![EpochSummary { epoch: 0, mean_loss: 0.75, mean_advantage: None }],
        };
        log.validate().unwrap();
        let text = log.to_jsonl();
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, log.records[0]);
        assert!(!text.lines().next().unwrap().contains("mean_advantage"));
        let mut bad = log.clone();
        bad.records[1].step = 1;
        assert!(bad.validate().is_err());
    }
}
