use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::pieces;
use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/action_lexicon.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Stop,
    ContinueForward,
    TurnLeft,
    TurnRight,
    SlowDown,
    Wait,
    Yield,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Slow,
    Moderate,
    Fast,
    None,
}

impl Verb {
    fn parse(s: &str) -> Option<Verb> {
        Some(match s {
            "stop" => Verb::Stop,
            "continue_forward" => Verb::ContinueForward,
            "turn_left" => Verb::TurnLeft,
            "turn_right" => Verb::TurnRight,
            "slow_down" => Verb::SlowDown,
            "wait" => Verb::Wait,
            "yield" => Verb::Yield,
            _ => return None,
        })
    }
}

impl Speed {
    fn parse(s: &str) -> Option<Speed> {
        Some(match s {
            "slow" => Speed::Slow,
            "moderate" => Speed::Moderate,
            "fast" => Speed::Fast,
            _ => return None,
        })
    }
}

/// The `(verb, speed)` unit compared by action accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalAction {
    pub verb: Verb,
    pub speed: Speed,
}

impl fmt::Display for CanonicalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self.verb).expect("serializable");
        let s = serde_json::to_value(self.speed).expect("serializable");
        write!(f, "({}, {})", v.as_str().unwrap_or("?"), s.as_str().unwrap_or("?"))
    }
}

/// Ordered verb rules and speed words, read from a versioned text file.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLexicon {
    pub version: u32,
    verbs: Vec<(Verb, Vec<Vec<String>>)>,
    speeds: Vec<(Speed, Vec<Vec<String>>)>,
}

impl ActionLexicon {
    pub fn builtin() -> Self {
        ActionLexicon::parse(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }

    /// Lines `verb <name>: phrase | phrase` and `speed <name>: word`, in
    /// priority order, plus one `version N` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let (mut verbs, mut speeds) = (Vec::new(), Vec::new());
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::invalid(format!("lexicon line {}: {m}", ln + 1));
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(v.trim().parse().map_err(|_| bad("bad version"))?);
                continue;
            }
            let (head, body) = line.split_once(':').ok_or_else(|| bad("expected `kind name: phrases`"))?;
            let (kind, name) = head.trim().split_once(' ').ok_or_else(|| bad("expected `kind name`"))?;
            let phrases: Vec<Vec<String>> = body.split('|').map(pieces).filter(|p| !p.is_empty()).collect();
            if phrases.is_empty() {
                return Err(bad("no phrases"));
            }
            match kind {
                "verb" => verbs.push((Verb::parse(name.trim()).ok_or_else(|| bad("unknown verb"))?, phrases)),
                "speed" => speeds.push((Speed::parse(name.trim()).ok_or_else(|| bad("unknown speed"))?, phrases)),
                _ => return Err(bad("kind must be verb or speed")),
            }
        }
        let version = version.ok_or_else(|| Error::invalid("lexicon has no version line"))?;
        if verbs.is_empty() {
            return Err(Error::invalid("lexicon has no verb rules"));
        }
        Ok(ActionLexicon { version, verbs, speeds })
    }
}

fn find(words: &[String], phrase: &[String]) -> Option<usize> {
    words.windows(phrase.len()).position(|w| w == phrase)
}

/// First verb rule (in lexicon order) present in the text, then the first
/// speed word in text order outside the matched verb phrase.
pub fn extract_action(text: &str, lexicon: &ActionLexicon) -> Result<CanonicalAction> {
    let words = pieces(text);
    if words.is_empty() {
        return Err(Error::invalid("extract_action: empty text"));
    }
    let hit = lexicon.verbs.iter().find_map(|(verb, phrases)| {
        phrases
            .iter()
            .find_map(|p| find(&words, p).map(|at| (*verb, at..at + p.len())))
    });
    let (verb, used) = hit.ok_or_else(|| Error::UnextractableAction(text.to_string()))?;
    let speed = (0..words.len())
        .filter(|i| !used.contains(i))
        .find_map(|i| {
            lexicon.speeds.iter().find_map(|(s, phrases)| {
                phrases
                    .iter()
                    .any(|p| words[i..].starts_with(p) && !(i..i + p.len()).any(|k| used.contains(&k)))
                    .then_some(*s)
            })
        })
        .unwrap_or(Speed::None);
    Ok(CanonicalAction { verb, speed })
}

/// Fraction of pairs whose canonical actions match exactly. Unparseable
/// predictions count as misses; an unparseable reference is a data error.
pub fn action_accuracy(predictions: &[String], references: &[String], lexicon: &ActionLexicon) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::invalid(format!(
            "action_accuracy: {} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("action_accuracy: no samples"));
    }
    let mut hits = 0usize;
    for (p, r) in predictions.iter().zip(references) {
        let want = extract_action(r, lexicon)?;
        if extract_action(p, lexicon).is_ok_and(|got| got == want) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}
