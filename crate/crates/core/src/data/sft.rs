use std::ops::Range;

use super::corpus::{DialogSample, PreferencePair, Turn};
use super::tokenizer::{Tokenizer, BOT_ID, EOT_ID, IMAGE_ID};
use crate::error::{Error, Result};
use crate::model::Segment;

/// Serialized conversation with its loss mask.
///
/// Layout per turn: `<bot> user <eot> <bot> assistant <eot>`. The mask is
/// true on assistant content and the closing `<eot>`; everything else is
/// context only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
    /// Supervised span of each turn; `spans[t].len()` is `N_t`.
    pub spans: Vec<Range<usize>>,
}

impl TokenizedSample {
    pub fn supervised_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn response_lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.len()).collect()
    }

    /// Re-derives the mask from segment labels and spans and checks it.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Sample {
                id: self.id.clone(),
                msg,
            })
        };
        let n = self.tokens.len();
        if self.mask.len() != n || self.segments.len() != n {
            return fail("mask/segment length differs from token count".into());
        }
        let mut prev_end = 0;
        let mut in_span = vec![false; n];
        for s in &self.spans {
            if s.start < prev_end || s.end > n || s.is_empty() {
                return fail(format!("span {s:?} out of order or empty"));
            }
            prev_end = s.end;
            in_span[s.clone()].iter_mut().for_each(|x| *x = true);
        }
        for i in 0..n {
            let is_resp = self.segments[i] == Segment::Response;
            if self.mask[i] != is_resp || self.mask[i] != in_span[i] {
                return fail(format!(
                    "mask at position {i} is {} but segment is {:?}",
                    self.mask[i], self.segments[i]
                ));
            }
            if (self.tokens[i] == IMAGE_ID) != (self.segments[i] == Segment::Visual) {
                return fail(format!("placeholder labelling wrong at position {i}"));
            }
        }
        if self.spans.iter().map(|s| s.len()).sum::<usize>() != self.supervised_count() {
            return fail("span lengths disagree with mask".into());
        }
        if self.supervised_count() == 0 {
            return fail("no supervised tokens".into());
        }
        Ok(())
    }
}

fn push_text(tokens: &mut Vec<u32>, segs: &mut Vec<Segment>, ids: &[u32], seg: Segment) {
    for &t in ids {
        tokens.push(t);
        segs.push(if t == IMAGE_ID { Segment::Visual } else { seg });
    }
}

pub fn build_sft_example(sample: &DialogSample, tok: &Tokenizer) -> Result<TokenizedSample> {
    sample.validate()?;
    let mut tokens = Vec::new();
    let mut segments = Vec::new();
    let mut spans = Vec::new();
    for (t, turn) in sample.turns.iter().enumerate() {
        push_text(&mut tokens, &mut segments, &[BOT_ID], Segment::TextPrompt);
        push_text(&mut tokens, &mut segments, &tok.tokenize(&turn.user), Segment::TextPrompt);
        push_text(&mut tokens, &mut segments, &[EOT_ID, BOT_ID], Segment::TextPrompt);
        let answer = tok.tokenize(&turn.assistant);
        if answer.is_empty() {
            return Err(Error::Sample {
                id: sample.id.clone(),
                msg: format!("turn {} has an empty assistant response", t + 1),
            });
        }
        let start = tokens.len();
        push_text(&mut tokens, &mut segments, &answer, Segment::Response);
        push_text(&mut tokens, &mut segments, &[EOT_ID], Segment::Response);
        spans.push(start..tokens.len());
    }
    if !tokens.contains(&IMAGE_ID) {
        return Err(Error::Sample {
            id: sample.id.clone(),
            msg: "missing image placeholder".into(),
        });
    }
    let mask = segments.iter().map(|s| *s == Segment::Response).collect();
    let out = TokenizedSample {
        id: sample.id.clone(),
        tokens,
        mask,
        segments,
        spans,
    };
    out.validate()?;
    Ok(out)
}

/// Single-turn prompt ids ending with the assistant's `<bot>`, ready for
/// teacher forcing or generation.
pub fn prompt_tokens(prompt: &str, tok: &Tokenizer) -> Vec<u32> {
    dialogue_prompt_tokens(&[], prompt, tok)
}

/// Completed turns serialized as in training, then `question` and the
/// assistant's opening `<bot>`.
pub fn dialogue_prompt_tokens(history: &[Turn], question: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut ids = Vec::new();
    for t in history {
        ids.push(BOT_ID);
        ids.extend(tok.tokenize(&t.user));
        ids.extend([EOT_ID, BOT_ID]);
        ids.extend(tok.tokenize(&t.assistant));
        ids.push(EOT_ID);
    }
    ids.push(BOT_ID);
    ids.extend(tok.tokenize(question));
    ids.extend([EOT_ID, BOT_ID]);
    ids
}

/// Response ids closed by `<eot>`.
pub fn response_tokens(text: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut ids = tok.tokenize(text);
    ids.push(EOT_ID);
    ids
}

/// Tokenized preference pair sharing one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub id: String,
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

pub fn tokenize_pair(pair: &PreferencePair, tok: &Tokenizer) -> TokenizedPair {
    TokenizedPair {
        id: pair.id.clone(),
        prompt: prompt_tokens(&pair.prompt, tok),
        chosen: response_tokens(&pair.chosen, tok),
        rejected: response_tokens(&pair.rejected, tok),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture_corpus;

    fn tok_for(s: &DialogSample) -> Tokenizer {
        let texts: Vec<&str> = s.turns.iter().flat_map(|t| [t.user.as_str(), t.assistant.as_str()]).collect();
        Tokenizer::build(texts, 512).unwrap()
    }

    #[test]
    fn one_turn_stop_has_three_supervised() {
        let s = DialogSample {
            id: "a".into(),
            image: "a.ppm".into(),
            turns: vec![Turn {
                user: "<image> What should the robot do?".into(),
                assistant: "stop .".into(),
            }],
        };
        let ts = build_sft_example(&s, &tok_for(&s)).unwrap();
        assert_eq!(ts.supervised_count(), 3);
        assert_eq!(ts.response_lengths(), vec![3]);
        assert_eq!(*ts.tokens.last().unwrap(), EOT_ID);
    }

    #[test]
    fn five_turn_sample_has_five_spans() {
        let (corpus, _) = fixture_corpus(1, 0);
        let s = &corpus[0];
        let ts = build_sft_example(s, &tok_for(s)).unwrap();
        assert_eq!(ts.spans.len(), 5);
        for w in ts.spans.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert_eq!(ts.response_lengths().iter().sum::<usize>(), ts.supervised_count());
    }

    #[test]
    fn corrupted_masks_are_rejected_everywhere() {
        let (corpus, _) = fixture_corpus(1, 0);
        let s = &corpus[0];
        let ts = build_sft_example(s, &tok_for(s)).unwrap();
        for i in 0..ts.tokens.len() {
            let mut bad = ts.clone();
            bad.mask[i] = !bad.mask[i];
            assert!(bad.validate().is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn dialogue_prompt_is_training_prefix() {
        let (corpus, _) = fixture_corpus(1, 0);
        let s = &corpus[0];
        let tok = tok_for(s);
        let ts = build_sft_example(s, &tok).unwrap();
        let last = s.turns.len() - 1;
        let p = dialogue_prompt_tokens(&s.turns[..last], &s.turns[last].user, &tok);
        assert_eq!(p[..], ts.tokens[..ts.spans[last].start]);
    }

    #[test]
    fn empty_answer_rejected() {
        let s = DialogSample {
            id: "a".into(),
            image: "a.ppm".into(),
            turns: vec![Turn {
                user: "<image> Hi".into(),
                assistant: "   ".into(),
            }],
        };
        assert!(build_sft_example(&s, &tok_for(&s)).is_err());
    }
}
