use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once per command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Fully resolved settings after flag/file/default precedence.
    pub config: BTreeMap<String, Value>,
    pub seed: u64,
    /// Path → sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// Path → sha256 of every output file.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_label: Option<String>,
    /// Cumulative row label such as `SFT(projector) + DPO(lora)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn key(p: &Path) -> String {
    p.display().to_string()
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config_path.map(key),
            config: BTreeMap::new(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stage_label: None,
            model_label: None,
        }
    }

    pub fn set(&mut self, k: &str, v: impl Serialize) {
        self.config.insert(k.into(), serde_json::to_value(v).expect("serializable"));
    }

    pub fn input(&mut self, p: &Path) -> Result<()> {
        self.inputs.insert(key(p), sha256_file(p)?);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> Result<()> {
        self.outputs.insert(key(p), sha256_file(p)?);
        Ok(())
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
