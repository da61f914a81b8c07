use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter groups; every parameter name starts with its group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Projector,
    Lora,
    Vision,
    Lm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Projector,
        ParamGroup::Lora,
        ParamGroup::Vision,
        ParamGroup::Lm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Projector => "projector",
            ParamGroup::Lora => "lora",
            ParamGroup::Vision => "vision",
            ParamGroup::Lm => "lm",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('.').next()?;
        prefix.parse().ok()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "projector" => Ok(ParamGroup::Projector),
            "lora" => Ok(ParamGroup::Lora),
            "vision" => Ok(ParamGroup::Vision),
            "lm" => Ok(ParamGroup::Lm),
            other => Err(Error::invalid(format!(
                "unknown component `{other}` (expected projector, lora, vision or lm)"
            ))),
        }
    }
}

/// Parses `projector,lora` style lists.
pub fn parse_groups(s: &str) -> Result<BTreeSet<ParamGroup>> {
    s.split([',', '+'])
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Which components a training stage updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Projector only.
    SftDefault,
    /// LoRA adapters only.
    DpoDefault,
    /// Explicit set, e.g. the `projector+lora+vision` ablation.
    Custom(BTreeSet<ParamGroup>),
}

impl Stage {
    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        match self {
            Stage::SftDefault => [ParamGroup::Projector].into(),
            Stage::DpoDefault => [ParamGroup::Lora].into(),
            Stage::Custom(g) => g.clone(),
        }
    }
}

/// `SFT(projector+lora+vision)`-style label for a stage's trainable set.
pub fn stage_label(stage_name: &str, groups: &BTreeSet<ParamGroup>) -> String {
    let parts: Vec<&str> = groups.iter().map(|g| g.as_str()).collect();
    format!("{stage_name}({})", parts.join("+"))
}

/// All parameters of the network plus the current freeze mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// Random matrix with orthonormal rows (or columns, when taller than wide).
    fn orthogonal(&mut self, rows: usize, cols: usize) -> Tensor {
        let (r, c) = if rows <= cols { (rows, cols) } else { (cols, rows) };
        let mut m: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| self.rng.sample(StandardNormal)).collect())
            .collect();
        for i in 0..r {
            for j in 0..i {
                let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let mj = m[j].clone();
                for (a, b) in m[i].iter_mut().zip(mj) {
                    *a -= dot * b;
                }
            }
            let norm = m[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in m[i].iter_mut() {
                *a /= norm;
            }
        }
        let t = Tensor::new(vec![r, c], m.concat()).expect("shape");
        if rows <= cols {
            t
        } else {
            t.transpose()
        }
    }
}

pub(crate) const ATTN_MATS: [&str; 4] = ["q", "k", "v", "o"];

/// Builds a fresh state: random vision tower (frozen), projector, LM and
/// LoRA adapters with `B = 0`. Deterministic in `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = config.d_model;
    let v = config.vocab_size;
    let hidden = config.mlp_hidden();
    let mut p = BTreeMap::new();
    let mut put = |name: String, t: Tensor| {
        p.insert(name, t);
    };

    put("vision.patch.weight".into(), init.orthogonal(config.d_vision, config.patch_dim()));
    put("vision.patch.bias".into(), init.normal(vec![config.d_vision], 0.1));

    put(
        "projector.fc1.weight".into(),
        init.normal(vec![d, config.d_vision], 1.0 / (config.d_vision as f64).sqrt()),
    );
    put("projector.fc1.bias".into(), Tensor::zeros(vec![d]));
    put(
        "projector.fc2.weight".into(),
        init.normal(vec![d, d], 1.0 / (d as f64).sqrt()),
    );
    put("projector.fc2.bias".into(), Tensor::zeros(vec![d]));

    put("lm.wte".into(), init.normal(vec![v, d], 0.02));
    put("lm.wpe".into(), init.normal(vec![config.max_seq, d], 0.01));
    for l in 0..config.n_layers {
        let b = format!("lm.blocks.{l}");
        put(format!("{b}.ln1.gamma"), Tensor::filled(vec![d], 1.0));
        put(format!("{b}.ln1.beta"), Tensor::zeros(vec![d]));
        for m in ATTN_MATS {
            put(format!("{b}.attn.{m}.weight"), init.normal(vec![d, d], 0.02));
        }
        put(format!("{b}.ln2.gamma"), Tensor::filled(vec![d], 1.0));
        put(format!("{b}.ln2.beta"), Tensor::zeros(vec![d]));
        put(format!("{b}.mlp.fc1.weight"), init.normal(vec![hidden, d], 0.02));
        put(format!("{b}.mlp.fc1.bias"), Tensor::zeros(vec![hidden]));
        put(format!("{b}.mlp.fc2.weight"), init.normal(vec![d, hidden], 0.02));
        put(format!("{b}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
    }
    put("lm.ln_f.gamma".into(), Tensor::filled(vec![d], 1.0));
    put("lm.ln_f.beta".into(), Tensor::zeros(vec![d]));
    put("lm.head.weight".into(), init.normal(vec![v, d], 0.02));
    put("lm.head.bias".into(), Tensor::zeros(vec![v]));

    let r = config.lora_rank;
    for l in 0..config.n_layers {
        for m in ATTN_MATS {
            let b = format!("lora.blocks.{l}.attn.{m}");
            put(format!("{b}.a"), init.normal(vec![r, d], 1.0 / (d as f64).sqrt()));
            put(format!("{b}.b"), Tensor::zeros(vec![d, r]));
        }
    }

    let mut state = ModelState {
        config: config.clone(),
        seed,
        params: p,
        trainable: BTreeSet::new(),
    };
    state.set_stage_trainable(&Stage::SftDefault)?;
    Ok(state)
}

impl ModelState {
    /// Reassembles a state from stored parts, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: BTreeMap<String, Tensor>,
        trainable: BTreeSet<String>,
    ) -> Result<Self> {
        config.validate()?;
        for name in params.keys() {
            if ParamGroup::of(name).is_none() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has no group")));
            }
        }
        if let Some(missing) = trainable.iter().find(|n| !params.contains_key(*n)) {
            return Err(Error::Checkpoint(format!(
                "freeze mask names unknown parameter `{missing}`"
            )));
        }
        let reference = init_model(&config, 0)?;
        for (name, t) in &params {
            match reference.params.get(name) {
                Some(r) if r.shape() == t.shape() => {}
                Some(r) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, config implies {:?}",
                        t.shape(),
                        r.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("unexpected parameter `{name}`"))),
            }
        }
        for name in reference.params.keys() {
            if ParamGroup::of(name) != Some(ParamGroup::Lora) && !params.contains_key(name) {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            }
        }
        Ok(ModelState {
            config,
            seed,
            params,
            trainable,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn freeze_mask(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn has_adapters(&self) -> bool {
        self.params.keys().any(|n| n.starts_with("lora."))
    }

    /// Names of all parameters in `group`.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| ParamGroup::of(n) == Some(group))
            .cloned()
            .collect()
    }

    /// Sets the freeze mask to exactly the parameters of the stage's groups.
    pub fn set_stage_trainable(&mut self, stage: &Stage) -> Result<()> {
        let groups = stage.groups();
        if groups.is_empty() {
            return Err(Error::invalid("trainable set is empty"));
        }
        let mask: BTreeSet<String> = self
            .params
            .keys()
            .filter(|n| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .cloned()
            .collect();
        if groups.contains(&ParamGroup::Lora) && !self.has_adapters() {
            return Err(Error::invalid("stage trains LoRA but the model has no adapters"));
        }
        self.trainable = mask;
        Ok(())
    }

    /// Groups with at least one trainable parameter.
    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        self.trainable.iter().filter_map(|n| ParamGroup::of(n)).collect()
    }

    /// Registers every parameter on `tape`; trainable iff in the freeze mask.
    pub fn bind(&self, tape: &mut Tape) -> Result<BTreeMap<String, Var>> {
        self.bind_with(tape, |n| self.trainable.contains(n))
    }

    /// Registers every parameter as a frozen leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BTreeMap<String, Var>> {
        self.bind_with(tape, |_| false)
    }

    fn bind_with(
        &self,
        tape: &mut Tape,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.param(name, t.clone(), trainable(name))?);
        }
        Ok(vars)
    }

    /// Folds every adapter into its base matrix: `W' = W + (alpha/r)·B·A`.
    pub fn lora_merge(&self) -> Result<ModelState> {
        if !self.has_adapters() {
            return Err(Error::invalid("lora_merge: model has no adapters"));
        }
        let scale = self.config.lora_scale();
        let mut params = self.params.clone();
        for l in 0..self.config.n_layers {
            for m in ATTN_MATS {
                let a = &self.params[&format!("lora.blocks.{l}.attn.{m}.a")];
                let b = &self.params[&format!("lora.blocks.{l}.attn.{m}.b")];
                let delta = b.matmul(a)?;
                let w = params
                    .get_mut(&format!("lm.blocks.{l}.attn.{m}.weight"))
                    .expect("base weight");
                for (x, dv) in w.data_mut().iter_mut().zip(delta.data()) {
                    *x += scale * dv;
                }
            }
        }
        params.retain(|n, _| !n.starts_with("lora."));
        let trainable = self
            .trainable
            .iter()
            .filter(|n| !n.starts_with("lora."))
            .cloned()
            .collect();
        Ok(ModelState {
            config: self.config.clone(),
            seed: self.seed,
            params,
            trainable,
        })
    }

    /// Zeroes the output head so every next-token distribution is uniform.
    pub fn make_uniform_head(&mut self) {
        for name in ["lm.head.weight", "lm.head.bias"] {
            let t = self.params.get_mut(name).expect("head");
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&cfg(), 11).unwrap();
        let b = init_model(&cfg(), 11).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg(), 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn every_param_has_one_group_and_lora_b_is_zero() {
        let s = init_model(&cfg(), 1).unwrap();
        for (name, t) in s.params() {
            assert!(ParamGroup::of(name).is_some(), "{name}");
            if name.starts_with("lora.") && name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn vision_rows_are_orthonormal() {
        let s = init_model(&cfg(), 3).unwrap();
        let w = s.param("vision.patch.weight").unwrap();
        let g = w.matmul(&w.transpose()).unwrap();
        let (n, _) = g.dims2();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage_masks() {
        let mut s = init_model(&cfg(), 1).unwrap();
        s.set_stage_trainable(&Stage::SftDefault).unwrap();
        assert_eq!(s.freeze_mask().iter().cloned().collect::<Vec<_>>(), s.group_names(ParamGroup::Projector));
        s.set_stage_trainable(&Stage::DpoDefault).unwrap();
        assert_eq!(s.freeze_mask().iter().cloned().collect::<Vec<_>>(), s.group_names(ParamGroup::Lora));
        let g = parse_groups("projector,lora,vision").unwrap();
        s.set_stage_trainable(&Stage::Custom(g.clone())).unwrap();
        assert_eq!(stage_label("SFT", &g), "SFT(projector+lora+vision)");
        assert!(!s.trainable_groups().contains(&ParamGroup::Lm));
        assert!(s.set_stage_trainable(&Stage::Custom(BTreeSet::new())).is_err());
        assert!(parse_groups("projector,decoder").is_err());
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let s = init_model(&cfg(), 5).unwrap();
        let m = s.lora_merge().unwrap();
        assert!(!m.has_adapters());
        for (name, t) in m.params() {
            assert_eq!(t, &s.params()[name], "{name}");
        }
        assert!(m.lora_merge().is_err());
    }

    #[test]
    fn merge_rank_one_ones() {
        let c = ModelConfig {
            lora_rank: 1,
            lora_alpha: 1.0,
            n_layers: 1,
            ..cfg()
        };
        let mut s = init_model(&c, 2).unwrap();
        for m in ATTN_MATS {
            for ab in ["a", "b"] {
                let t = s.param_mut(&format!("lora.blocks.0.attn.{m}.{ab}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let merged = s.lora_merge().unwrap();
        for m in ATTN_MATS {
            let name = format!("lm.blocks.0.attn.{m}.weight");
            let before = &s.params()[&name];
            let after = &merged.params()[&name];
            for (x, y) in before.data().iter().zip(after.data()) {
                assert_eq!(*y, x + 1.0);
            }
        }
    }
}
