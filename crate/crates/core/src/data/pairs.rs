use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::corpus::{DialogSample, PreferencePair, Provenance};
use super::tokenizer::{pieces, spans, IMAGE_PLACEHOLDER};
use crate::error::{Error, Result};

const BUILTIN_RULES: &str = include_str!("../../data/perturbation_rules.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FactKind {
    Action,
    Direction,
    Speed,
}

/// Directed word-sequence substitution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbationRule {
    pub kind: FactKind,
    pub from: Vec<String>,
    pub to: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbationRules {
    pub version: u32,
    pub rules: Vec<PerturbationRule>,
}

impl PerturbationRules {
    pub fn builtin() -> Self {
        PerturbationRules::parse(BUILTIN_RULES).expect("builtin lexicon parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut rules = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::invalid(format!("rules line {}: {m}", ln + 1));
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(v.trim().parse().map_err(|_| bad("bad version"))?);
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad("missing rule body"))?;
            let kind = match kind {
                "action" => FactKind::Action,
                "direction" => FactKind::Direction,
                "speed" => FactKind::Speed,
                k => return Err(bad(&format!("unknown kind {k:?}"))),
            };
            let (both, (lhs, rhs)) = if let Some(p) = rest.split_once("<->") {
                (true, p)
            } else {
                (false, rest.split_once("->").ok_or_else(|| bad("expected `->` or `<->`"))?)
            };
            let (from, to) = (pieces(lhs), pieces(rhs));
            if from.is_empty() || to.is_empty() || from == to {
                return Err(bad("empty or identity substitution"));
            }
            if both {
                rules.push(PerturbationRule {
                    kind,
                    from: to.clone(),
                    to: from.clone(),
                });
            }
            rules.push(PerturbationRule { kind, from, to });
        }
        let version = version.ok_or_else(|| Error::invalid("rules file has no version line"))?;
        rules.sort_by(|a, b| (a.kind, &a.from, &a.to).cmp(&(b.kind, &b.from, &b.to)));
        Ok(PerturbationRules { version, rules })
    }

    /// Rules whose `from` sequence occurs in `text`.
    pub fn applicable(&self, text: &str) -> Vec<&PerturbationRule> {
        self.rules.iter().filter(|r| r.find(text).is_some()).collect()
    }
}

impl PerturbationRule {
    /// Byte range of the first whole-word occurrence of `from`.
    fn find(&self, text: &str) -> Option<(usize, usize)> {
        let sp = spans(text);
        let k = self.from.len();
        (0..sp.len().saturating_sub(k - 1))
            .find(|&i| sp[i..i + k].iter().zip(&self.from).all(|(s, w)| &s.2 == w))
            .map(|i| (sp[i].0, sp[i + k - 1].1))
    }

    /// Replaces the first occurrence, keeping a leading capital.
    pub fn apply(&self, text: &str) -> Option<String> {
        let (a, b) = self.find(text)?;
        let mut repl = self.to.join(" ");
        if text[a..].starts_with(|c: char| c.is_uppercase()) {
            let mut cs = repl.chars();
            if let Some(f) = cs.next() {
                repl = f.to_uppercase().chain(cs).collect();
            }
        }
        Some(format!("{}{}{}", &text[..a], repl, &text[b..]))
    }
}

/// Per-sample seed mixed from a global seed and the sample id.
pub fn derive_seed(global: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Builds a preference pair from the final (action) turn: the annotated
/// answer is chosen, and one seeded-uniformly-picked applicable rule
/// produces the rejected answer.
pub fn build_dpo_pair(sample: &DialogSample, rules: &PerturbationRules, seed: u64) -> Result<PreferencePair> {
    sample.validate()?;
    let last = sample.final_turn();
    let chosen = last.assistant.clone();
    let applicable = rules.applicable(&chosen);
    if applicable.is_empty() {
        return Err(Error::NoApplicableRule(chosen));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rule = applicable[rng.random_range(0..applicable.len())];
    let rejected = rule.apply(&chosen).expect("rule applicable");
    let prompt = if pieces(&last.user).iter().any(|p| p == IMAGE_PLACEHOLDER) {
        last.user.clone()
    } else {
        format!("{IMAGE_PLACEHOLDER} {}", last.user)
    };
    let pair = PreferencePair {
        id: sample.id.clone(),
        image: sample.image.clone(),
        prompt,
        chosen,
        rejected,
        chosen_provenance: Provenance::HumanAnnotated,
        rejected_provenance: Provenance::Perturbed,
    };
    pair.validate()?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Turn;

    fn sample(answer: &str) -> DialogSample {
        DialogSample {
            id: "x".into(),
            image: "x.ppm".into(),
            turns: vec![
                Turn {
                    user: "<image> What do you perceive from the image?".into(),
                    assistant: "A human.".into(),
                },
                Turn {
                    user: "What should the robot do?".into(),
                    assistant: answer.into(),
                },
            ],
        }
    }

    #[test]
    fn builtin_parses_both_directions() {
        let r = PerturbationRules::builtin();
        assert_eq!(r.version, 1);
        let has = |f: &str, t: &str| r.rules.iter().any(|x| x.from == pieces(f) && x.to == pieces(t));
        assert!(has("stop", "continue") && has("continue", "stop"));
        assert!(has("moderate speed", "fast speed") && has("fast speed", "moderate speed"));
    }

    #[test]
    fn stop_becomes_continue() {
        let p = build_dpo_pair(&sample("The robot should stop, wait for clear path."), &PerturbationRules::builtin(), 1).unwrap();
        assert_eq!(p.chosen, "The robot should stop, wait for clear path.");
        assert_eq!(p.rejected, "The robot should continue, wait for clear path.");
        assert_eq!(p.prompt, "<image> What should the robot do?");
    }

    #[test]
    fn moderate_continue_has_two_options() {
        let text = "The robot should continue straight at a moderate speed.";
        let rules = PerturbationRules::builtin();
        assert_eq!(rules.applicable(text).len(), 2);
        let outs: std::collections::BTreeSet<String> = (0..32)
            .map(|s| build_dpo_pair(&sample(text), &rules, s).unwrap().rejected)
            .collect();
        assert!(outs.contains("The robot should stop straight at a moderate speed."));
        assert!(outs.contains("The robot should continue straight at a fast speed."));
    }

    #[test]
    fn capital_preserved() {
        let rules = PerturbationRules::builtin();
        let r = rules.rules.iter().find(|r| r.from == ["stop"]).unwrap();
        assert_eq!(r.apply("Stop now.").unwrap(), "Continue now.");
    }

    #[test]
    fn deterministic_and_no_rule_error() {
        let rules = PerturbationRules::builtin();
        let s = sample("The robot should turn left at a slow speed.");
        assert_eq!(build_dpo_pair(&s, &rules, 9).unwrap(), build_dpo_pair(&s, &rules, 9).unwrap());
        let e = build_dpo_pair(&sample("Wait here."), &rules, 0).unwrap_err();
        assert!(matches!(e, Error::NoApplicableRule(ref t) if t == "Wait here."));
    }

    #[test]
    fn whole_word_matching() {
        let rules = PerturbationRules::builtin();
        // "stopped" must not match "stop"; "leftover" must not match "left"
        assert!(rules.applicable("The bus stopped with leftover seats.").is_empty());
    }

    #[test]
    fn derived_seeds_differ_by_id() {
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
    }
}
