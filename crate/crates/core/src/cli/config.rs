use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use crate::model::ModelConfig;

/// Keys a config file may set.
const KNOWN: &[&str] = &[
    "seed",
    "epochs",
    "lr",
    "warmup_ratio",
    "batch_size",
    "beta",
    "trainable",
    "reference_mode",
    "n_test",
    "n_samples",
    "provider",
    "provider_dim",
    "max_new_tokens",
    "bertscore_baseline",
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "max_seq",
    "patch_size",
    "n_visual_tokens",
    "d_vision",
    "lora_rank",
    "lora_alpha",
];

/// `key = value` settings; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", ln + 1))?;
            let k = k.trim().replace('-', "_");
            if !KNOWN.contains(&k.as_str()) {
                bail!("config line {}: unknown key `{k}`", ln + 1);
            }
            if values.insert(k.clone(), v.trim().to_string()).is_some() {
                bail!("config line {}: duplicate key `{k}`", ln + 1);
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                ConfigFile::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key `{key}`: {e}")))
            .transpose()
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Model hyperparameters over the defaults.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            vocab_size: self.pick(None, "vocab_size", d.vocab_size)?,
            d_model: self.pick(None, "d_model", d.d_model)?,
            n_layers: self.pick(None, "n_layers", d.n_layers)?,
            n_heads: self.pick(None, "n_heads", d.n_heads)?,
            max_seq: self.pick(None, "max_seq", d.max_seq)?,
            patch_size: self.pick(None, "patch_size", d.patch_size)?,
            n_visual_tokens: self.pick(None, "n_visual_tokens", d.n_visual_tokens)?,
            d_vision: self.pick(None, "d_vision", d.d_vision)?,
            lora_rank: self.pick(None, "lora_rank", d.lora_rank)?,
            lora_alpha: self.pick(None, "lora_alpha", d.lora_alpha)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
