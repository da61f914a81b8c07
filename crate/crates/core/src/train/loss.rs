use crate::data::{TokenizedPair, TokenizedSample};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{assemble_context, assemble_labeled, AssembledContext, Graph, ModelConfig, ModelState};

/// A tokenized dialogue assembled with its image, plus the
/// `(logit row, target id)` of every supervised token.
#[derive(Clone, Debug)]
pub struct SftExample {
    pub id: String,
    pub ctx: AssembledContext,
    pub targets: Vec<(usize, usize)>,
    /// Supervised tokens per turn.
    pub turn_lengths: Vec<usize>,
}

impl SftExample {
    pub fn new(sample: &TokenizedSample, image: &Image, config: &ModelConfig) -> Result<Self> {
        sample.validate()?;
        let ctx = assemble_labeled(&sample.tokens, &sample.segments, Some(image), config.n_visual_tokens)?;
        if ctx.len() > config.max_seq {
            return Err(Error::Sample {
                id: sample.id.clone(),
                msg: format!("assembled length {} exceeds max_seq {}", ctx.len(), config.max_seq),
            });
        }
        let mut targets = Vec::new();
        for (i, (&t, &m)) in sample.tokens.iter().zip(&sample.mask).enumerate() {
            if !m {
                continue;
            }
            let p = ctx.position_of_source(i).expect("text token has a position");
            if p == 0 {
                return Err(Error::Sample {
                    id: sample.id.clone(),
                    msg: "first position cannot be supervised".into(),
                });
            }
            targets.push((p - 1, t as usize));
        }
        Ok(SftExample {
            id: sample.id.clone(),
            ctx,
            targets,
            turn_lengths: sample.response_lengths(),
        })
    }
}

/// Prompt context shared by both responses of a preference pair.
#[derive(Clone, Debug)]
pub struct DpoExample {
    pub id: String,
    pub ctx: AssembledContext,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl DpoExample {
    pub fn new(pair: &TokenizedPair, image: &Image, config: &ModelConfig) -> Result<Self> {
        let fail = |msg: String| Error::Sample { id: pair.id.clone(), msg };
        if pair.chosen.is_empty() || pair.rejected.is_empty() {
            return Err(fail("empty response".into()));
        }
        let ctx = assemble_context(&pair.prompt, Some(image), config.n_visual_tokens)?;
        let longest = ctx.len() + pair.chosen.len().max(pair.rejected.len());
        if longest > config.max_seq {
            return Err(fail(format!("assembled length {longest} exceeds max_seq {}", config.max_seq)));
        }
        Ok(DpoExample {
            id: pair.id.clone(),
            ctx,
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
        })
    }
}

fn finite(tape: &Tape, v: Var, what: &str) -> Result<Var> {
    let x = tape.value(v).item();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("{what} is non-finite ({x})")));
    }
    Ok(v)
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Per-sample masked next-token NLL normalized by that sample's supervised
/// token count, averaged over the batch.
pub fn sft_loss_graph(tape: &mut Tape, g: &Graph, batch: &[SftExample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("sft_loss: empty batch"));
    }
    let mut per = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.targets.is_empty() {
            return Err(Error::Sample {
                id: ex.id.clone(),
                msg: "no supervised tokens".into(),
            });
        }
        let logits = g.forward(tape, &ex.ctx)?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.gather(lp, &ex.targets)?;
        let s = tape.sum(picked)?;
        per.push(tape.scale(s, -1.0 / ex.targets.len() as f64)?);
    }
    let loss = mean_of(tape, &per)?;
    finite(tape, loss, "sft loss")
}

/// `log π(chosen | ctx) − log π(rejected | ctx)`.
pub fn advantage_graph(tape: &mut Tape, g: &Graph, ex: &DpoExample) -> Result<Var> {
    let lc = g.sequence_logprob(tape, &ex.ctx, &ex.chosen)?;
    let lr = g.sequence_logprob(tape, &ex.ctx, &ex.rejected)?;
    let neg = tape.scale(lr, -1.0)?;
    tape.add(lc, neg)
}

/// Loss node plus one advantage node per pair.
///
/// With `reference`, each advantage is shifted by the matching reference
/// advantage before the logistic loss.
pub fn dpo_loss_graph(
    tape: &mut Tape,
    g: &Graph,
    batch: &[DpoExample],
    beta: f64,
    reference: Option<&[f64]>,
) -> Result<(Var, Vec<Var>)> {
    if batch.is_empty() {
        return Err(Error::invalid("dpo_loss: empty batch"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    if reference.is_some_and(|r| r.len() != batch.len()) {
        return Err(Error::invalid("reference advantages do not match batch"));
    }
    let mut advs = Vec::with_capacity(batch.len());
    for ex in batch {
        advs.push(advantage_graph(tape, g, ex)?);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (k, &a) in advs.iter().enumerate() {
        let shifted = match reference {
            Some(r) => {
                let c = tape.constant(Tensor::scalar(-r[k]));
                tape.add(a, c)?
            }
            None => a,
        };
        let z = tape.scale(shifted, beta)?;
        let ls = tape.log_sigmoid(z)?;
        terms.push(tape.scale(ls, -1.0)?);
    }
    let loss = mean_of(tape, &terms)?;
    Ok((finite(tape, loss, "dpo loss")?, advs))
}

fn with_graph<T>(state: &ModelState, f: impl FnOnce(&mut Tape, &Graph) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = state.bind_frozen(&mut tape)?;
    let g = Graph::new(&state.config, &vars);
    f(&mut tape, &g)
}

pub fn sft_loss(state: &ModelState, batch: &[SftExample]) -> Result<f64> {
    with_graph(state, |tape, g| {
        let l = sft_loss_graph(tape, g, batch)?;
        Ok(tape.value(l).item())
    })
}

pub fn advantage(state: &ModelState, ex: &DpoExample) -> Result<f64> {
    with_graph(state, |tape, g| {
        let a = advantage_graph(tape, g, ex)?;
        Ok(tape.value(a).item())
    })
}

pub fn dpo_loss(state: &ModelState, batch: &[DpoExample], beta: f64) -> Result<f64> {
    with_graph(state, |tape, g| {
        let (l, _) = dpo_loss_graph(tape, g, batch, beta, None)?;
        Ok(tape.value(l).item())
    })
}

/// `−mean(log σ(β·Δ))` for given advantages.
pub fn dpo_loss_from_advantages(advantages: &[f64], beta: f64) -> Result<f64> {
    if advantages.is_empty() {
        return Err(Error::invalid("dpo_loss: empty batch"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::vector(advantages.to_vec()));
    let z = tape.scale(d, beta)?;
    let ls = tape.log_sigmoid(z)?;
    let m = tape.mean(ls)?;
    let loss = -tape.value(m).item();
    if !loss.is_finite() {
        return Err(Error::Numeric("dpo loss is non-finite".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dpo_anchors() {
        assert!((dpo_loss_from_advantages(&[0.0, 0.0], 0.1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dpo_loss_from_advantages(&[10.0], 0.1).unwrap() - 0.313262).abs() < 1e-6);
        let l = dpo_loss_from_advantages(&[0.0, 10.0, -10.0], 0.1).unwrap();
        let oracle = (std::f64::consts::LN_2 + (1.0 + (-1.0f64).exp()).ln() + (1.0 + 1.0f64.exp()).ln()) / 3.0;
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.773224).abs() < 1e-6);
    }

    #[test]
    fn dpo_decreasing_in_advantage() {
        let mut prev = f64::INFINITY;
        for k in -50..=50 {
            let l = dpo_loss_from_advantages(&[k as f64], 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn beta_must_be_positive() {
        assert!(dpo_loss_from_advantages(&[1.0], 0.0).is_err());
        assert!(dpo_loss_from_advantages(&[], 0.1).is_err());
    }
}
