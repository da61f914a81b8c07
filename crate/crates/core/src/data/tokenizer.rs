use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOT_ID: u32 = 1;
pub const EOT_ID: u32 = 2;
pub const IMAGE_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const N_RESERVED: usize = 5;

pub const IMAGE_PLACEHOLDER: &str = "<image>";
const RESERVED: [&str; N_RESERVED] = ["<pad>", "<bot>", "<eot>", IMAGE_PLACEHOLDER, "<unk>"];

/// Splits text into lowercase word and punctuation pieces.
///
/// Alphanumeric runs form words; every other non-space character is a piece
/// of its own, except the literal `<image>` placeholder.
pub fn pieces(text: &str) -> Vec<String> {
    spans(text).into_iter().map(|(_, _, p)| p).collect()
}

/// [`pieces`] with byte ranges into the original text.
pub fn spans(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if text[i..].len() >= IMAGE_PLACEHOLDER.len()
            && text.is_char_boundary(i + IMAGE_PLACEHOLDER.len())
            && text[i..i + IMAGE_PLACEHOLDER.len()].eq_ignore_ascii_case(IMAGE_PLACEHOLDER)
        {
            out.push((i, i + IMAGE_PLACEHOLDER.len(), IMAGE_PLACEHOLDER.to_string()));
            for _ in 0..IMAGE_PLACEHOLDER.chars().count() {
                chars.next();
            }
        } else if c.is_alphanumeric() {
            let mut end = i;
            let mut w = String::new();
            while let Some(&(j, d)) = chars.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                w.extend(d.to_lowercase());
                end = j + d.len_utf8();
                chars.next();
            }
            out.push((i, end, w));
        } else {
            chars.next();
            out.push((i, i + c.len_utf8(), c.to_lowercase().collect()));
        }
    }
    out
}

/// Whitespace-normalized form that detokenize(tokenize(s)) reproduces.
pub fn normalize(text: &str) -> String {
    pieces(text).join(" ")
}

/// Word-level vocabulary with a fixed reserved-id block.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Tokenizer {
    /// Most frequent pieces first (ties alphabetical), capped so the total
    /// including reserved ids is at most `max_size`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < N_RESERVED {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size {max_size} below reserved block {N_RESERVED}"
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for p in pieces(t) {
                if !RESERVED.contains(&p.as_str()) {
                    *counts.entry(p).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Tokenizer::from_tokens(tokens)
    }

    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Tokenizer {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, piece: &str) -> u32 {
        self.token_to_id.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map_or(RESERVED[UNK_ID as usize], String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pieces(text).iter().map(|p| self.id(p)).collect()
    }

    /// Space-joined pieces; reserved delimiters other than `<image>` are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOT_ID | EOT_ID))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        Tokenizer::from_tokens(s.lines().map(str::to_string).collect())
    }
}
