use std::collections::BTreeMap;

use crate::diffcore::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Adaptive-moment hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Moment buffers for exactly the parameters in the freeze mask.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: AdamW,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(state: &ModelState, hyper: AdamW) -> Self {
        let zeros = |n: &String| (n.clone(), Tensor::zeros(state.params()[n].shape().to_vec()));
        OptimizerState {
            hyper,
            step: 0,
            m: state.freeze_mask().iter().map(zeros).collect(),
            v: state.freeze_mask().iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of one parameter.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64) -> Result<f64> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        for name in grads.keys() {
            if !state.is_trainable(name) {
                return Err(Error::FreezeViolation(name.clone()));
            }
        }
        if !self.m.keys().eq(state.freeze_mask().iter()) {
            return Err(Error::invalid("optimizer buffers do not match the freeze mask"));
        }
        for name in state.freeze_mask() {
            match grads.get(name) {
                None => return Err(Error::invalid(format!("missing gradient for `{name}`"))),
                Some(g) if g.shape() != state.params()[name].shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        left: g.shape().to_vec(),
                        right: state.params()[name].shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }

        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip = match self.hyper.max_grad_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let names: Vec<String> = state.freeze_mask().iter().cloned().collect();
        for name in names {
            let g = grads[&name].data();
            let m = self.m.get_mut(&name).expect("buffer").data_mut();
            let v = self.v.get_mut(&name).expect("buffer").data_mut();
            let p = state.param_mut(&name).expect("param").data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * p[i]);
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("parameter `{name}` became non-finite")));
            }
        }
        Ok(norm)
    }
}
