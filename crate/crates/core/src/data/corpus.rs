use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tokenizer::{pieces, IMAGE_PLACEHOLDER};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub assistant: String,
}

/// One image-grounded multi-turn conversation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogSample {
    pub id: String,
    /// Image path, relative to the corpus file's directory unless absolute.
    pub image: String,
    pub turns: Vec<Turn>,
}

fn placeholder_count(text: &str) -> usize {
    pieces(text).iter().filter(|p| *p == IMAGE_PLACEHOLDER).count()
}

impl DialogSample {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Sample {
                id: self.id.clone(),
                msg,
            })
        };
        if self.turns.is_empty() {
            return fail("no dialogue turns".into());
        }
        let total: usize = self.turns.iter().map(|t| placeholder_count(&t.user)).sum();
        if total != 1 {
            return fail(format!("expected exactly one {IMAGE_PLACEHOLDER} placeholder, found {total}"));
        }
        if placeholder_count(&self.turns[0].user) != 1 {
            return fail(format!("{IMAGE_PLACEHOLDER} must appear in the first user turn"));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.assistant.trim().is_empty() {
                return fail(format!("turn {} has an empty assistant response", t + 1));
            }
            if placeholder_count(&turn.assistant) > 0 {
                return fail(format!("turn {} assistant text contains a placeholder", t + 1));
            }
        }
        Ok(())
    }

    pub fn final_turn(&self) -> &Turn {
        self.turns.last().expect("validated sample has turns")
    }

    pub fn image_path(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

#[derive(Serialize)]
struct Message<'a> {
    from: &'a str,
    value: &'a str,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    id: &'a str,
    image: &'a str,
    conversations: Vec<Message<'a>>,
}

fn record_err(path: &Path, line: usize, index: usize, field: &str, msg: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        index,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn str_field(v: &Value, field: &str, path: &Path, line: usize, index: usize) -> Result<String> {
    match v.get(field) {
        None => Err(record_err(path, line, index, field, "missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(record_err(path, line, index, field, "expected a string")),
    }
}

/// Iterates non-blank lines as `(line_no, record_index, json)`.
fn json_lines(path: &Path) -> Result<Vec<(usize, usize, Value)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len();
        let v: Value = serde_json::from_str(line)
            .map_err(|e| record_err(path, ln + 1, index, "<record>", e.to_string()))?;
        if !v.is_object() {
            return Err(record_err(path, ln + 1, index, "<record>", "expected a JSON object"));
        }
        out.push((ln + 1, index, v));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogSample>> {
    let mut samples = Vec::new();
    for (line, index, v) in json_lines(path)? {
        let id = str_field(&v, "id", path, line, index)?;
        let image = str_field(&v, "image", path, line, index)?;
        let conv = match v.get("conversations") {
            None => return Err(record_err(path, line, index, "conversations", "missing")),
            Some(Value::Array(a)) => a,
            Some(_) => return Err(record_err(path, line, index, "conversations", "expected an array")),
        };
        if conv.len() % 2 != 0 || conv.is_empty() {
            return Err(record_err(
                path,
                line,
                index,
                "conversations",
                format!("expected alternating human/gpt pairs, got {} messages", conv.len()),
            ));
        }
        let mut turns = Vec::new();
        for (k, pair) in conv.chunks(2).enumerate() {
            let mut texts = [String::new(), String::new()];
            for (slot, (msg, want)) in pair.iter().zip(["human", "gpt"]).enumerate() {
                let field = format!("conversations[{}]", 2 * k + slot);
                let from = msg.get("from").and_then(Value::as_str);
                if from != Some(want) {
                    return Err(record_err(
                        path,
                        line,
                        index,
                        &format!("{field}.from"),
                        format!("expected {want:?}, got {from:?}"),
                    ));
                }
                texts[slot] = msg
                    .get("value")
                    .and_then(Value::as_str)
                    .ok_or_else(|| record_err(path, line, index, &format!("{field}.value"), "missing string"))?
                    .to_string();
            }
            let [user, assistant] = texts;
            turns.push(Turn { user, assistant });
        }
        let sample = DialogSample { id, image, turns };
        sample
            .validate()
            .map_err(|e| record_err(path, line, index, "conversations", e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn corpus_to_jsonl(samples: &[DialogSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let conversations = s
            .turns
            .iter()
            .flat_map(|t| {
                [
                    Message {
                        from: "human",
                        value: &t.user,
                    },
                    Message {
                        from: "gpt",
                        value: &t.assistant,
                    },
                ]
            })
            .collect();
        let rec = SampleRecord {
            id: &s.id,
            image: &s.image,
            conversations,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(samples: &[DialogSample], path: &Path) -> Result<()> {
    fs::write(path, corpus_to_jsonl(samples))?;
    Ok(())
}

/// Who wrote one side of a preference pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    HumanAnnotated,
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub id: String,
    pub image: String,
    /// Single user turn containing the image placeholder.
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_provenance: Provenance,
    pub rejected_provenance: Provenance,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::Sample {
                id: self.id.clone(),
                msg: msg.to_string(),
            })
        };
        if self.chosen == self.rejected {
            return fail("chosen and rejected responses are identical");
        }
        if placeholder_count(&self.prompt) != 1 {
            return fail("prompt must contain exactly one image placeholder");
        }
        if pieces(&self.chosen).is_empty() || pieces(&self.rejected).is_empty() {
            return fail("empty response");
        }
        Ok(())
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> PreferencePair {
        PreferencePair {
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            chosen_provenance: self.rejected_provenance,
            rejected_provenance: self.chosen_provenance,
            ..self.clone()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: String,
    image: String,
    prompt: String,
    chosen: String,
    rejected: String,
}

pub fn pairs_to_jsonl(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            id: p.id.clone(),
            image: p.image.clone(),
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    fs::write(path, pairs_to_jsonl(pairs))?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (line, index, v) in json_lines(path)? {
        let f = |name: &str| str_field(&v, name, path, line, index);
        let pair = PreferencePair {
            id: f("id")?,
            image: f("image")?,
            prompt: f("prompt")?,
            chosen: f("chosen")?,
            rejected: f("rejected")?,
            chosen_provenance: Provenance::HumanAnnotated,
            rejected_provenance: Provenance::Perturbed,
        };
        pair.validate()
            .map_err(|e| record_err(path, line, index, "<record>", e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}
