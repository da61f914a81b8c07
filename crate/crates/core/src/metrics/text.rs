use super::embedding::{cosine, norm, EmbeddingProvider};
use super::emd::emd;
use crate::data::pieces;
use crate::error::{Error, Result};

/// Greedy-matching token similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BertScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl BertScore {
    /// `s -> (s - b) / (1 - b)` on each of P, R and F1.
    pub fn rescaled(self, baseline: f64) -> Result<BertScore> {
        if !(baseline < 1.0 && baseline.is_finite()) {
            return Err(Error::invalid(format!("baseline {baseline} must be below 1")));
        }
        let t = |s: f64| (s - baseline) / (1.0 - baseline);
        Ok(BertScore {
            p: t(self.p),
            r: t(self.r),
            f1: t(self.f1),
        })
    }
}

/// P averages, over candidate tokens, the best cosine to any reference
/// token; R is the same from the reference side.
pub fn bertscore(candidate: &[String], reference: &[String], provider: &dyn EmbeddingProvider) -> Result<BertScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::invalid("bertscore: empty token list"));
    }
    let cv: Vec<Vec<f64>> = candidate.iter().map(|t| provider.token_vector(t)).collect::<Result<_>>()?;
    let rv: Vec<Vec<f64>> = reference.iter().map(|t| provider.token_vector(t)).collect::<Result<_>>()?;
    let mut sim = vec![vec![0.0; rv.len()]; cv.len()];
    for (i, c) in cv.iter().enumerate() {
        for (j, r) in rv.iter().enumerate() {
            sim[i][j] = cosine(c, r)?;
        }
    }
    let best = |row: &mut dyn Iterator<Item = f64>| row.fold(f64::NEG_INFINITY, f64::max);
    let p = sim.iter().map(|row| best(&mut row.iter().copied())).sum::<f64>() / cv.len() as f64;
    let r = (0..rv.len()).map(|j| best(&mut sim.iter().map(|row| row[j]))).sum::<f64>() / rv.len() as f64;
    Ok(BertScore { p, r, f1: f1_of(p, r) })
}

/// [`bertscore`] on raw texts.
pub fn bertscore_text(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<BertScore> {
    bertscore(&pieces(candidate), &pieces(reference), provider)
}

/// Mean F1 over all ordered pairs of distinct texts, a corpus baseline for
/// [`BertScore::rescaled`].
pub fn estimate_baseline(texts: &[String], provider: &dyn EmbeddingProvider) -> Result<f64> {
    if texts.len() < 2 {
        return Err(Error::invalid("baseline needs at least two texts"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (i, a) in texts.iter().enumerate() {
        for (j, b) in texts.iter().enumerate() {
            if i != j {
                sum += bertscore_text(a, b, provider)?.f1;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Cosine of the mean-pooled sentence vectors.
pub fn sbert_cos(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let (c, r) = (pieces(candidate), pieces(reference));
    if c.is_empty() || r.is_empty() {
        return Err(Error::invalid("sbert_cos: empty text"));
    }
    cosine(&provider.sentence_vector(&c)?, &provider.sentence_vector(&r)?)
}

/// Sentences as token lists, split after `.`, `!` and `?` (terminators are
/// dropped; sentences with no tokens left are skipped).
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for p in pieces(text) {
        if matches!(p.as_str(), "." | "!" | "?") {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(p);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceMover {
    pub emd: f64,
    pub similarity: f64,
}

fn sentence_side(text: &str, provider: &dyn EmbeddingProvider) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let sents = split_sentences(text);
    if sents.is_empty() {
        return Err(Error::invalid("sms: text has no sentences"));
    }
    let total: usize = sents.iter().map(Vec::len).sum();
    let weights = sents.iter().map(|s| s.len() as f64 / total as f64).collect();
    let mut vecs = Vec::with_capacity(sents.len());
    for s in &sents {
        let v = provider.sentence_vector(s)?;
        let n = norm(&v);
        if n == 0.0 {
            return Err(Error::Numeric("sms: zero-norm sentence vector".into()));
        }
        vecs.push(v.into_iter().map(|x| x / n).collect());
    }
    Ok((weights, vecs))
}

/// Earth mover's distance between token-count-weighted, unit-normalized
/// sentence vectors under euclidean cost; similarity is `1 / (1 + emd)`.
pub fn sentence_mover(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<SentenceMover> {
    let (wa, va) = sentence_side(candidate, provider)?;
    let (wb, vb) = sentence_side(reference, provider)?;
    let cost: Vec<Vec<f64>> = va
        .iter()
        .map(|x| vb.iter().map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()).collect())
        .collect();
    let d = emd(&wa, &wb, &cost)?;
    Ok(SentenceMover {
        emd: d,
        similarity: 1.0 / (1.0 + d),
    })
}

pub fn sms(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    Ok(sentence_mover(candidate, reference, provider)?.similarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{HashProvider, TableProvider};

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn identity_scores_one() {
        let p = HashProvider::new(1, 32);
        let t = "The robot should stop, wait for clear path.";
        let b = bertscore_text(t, t, &p).unwrap();
        assert_eq!((b.p, b.r, b.f1), (1.0, 1.0, 1.0));
        assert_eq!(sbert_cos(t, t, &p).unwrap(), 1.0);
        assert_eq!(sms(t, t, &p).unwrap(), 1.0);
    }

    #[test]
    fn hand_enumerated_greedy_match() {
        let tp = TableProvider::new([("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])].into()).unwrap();
        let s = bertscore(&toks("a"), &toks("a b"), &tp).unwrap();
        assert_eq!((s.p, s.r), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let sw = bertscore(&toks("a b"), &toks("a"), &tp).unwrap();
        assert_eq!((sw.p, sw.r, sw.f1), (s.r, s.p, s.f1));
    }

    #[test]
    fn orthogonal_sides_score_zero() {
        let tp = TableProvider::new([("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])].into()).unwrap();
        let s = bertscore(&toks("a a"), &toks("b"), &tp).unwrap();
        assert_eq!((s.p, s.r, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(sbert_cos("a", "b", &tp).unwrap(), 0.0);
    }

    #[test]
    fn single_sentence_sms_is_forced() {
        let tp = TableProvider::new([("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])].into()).unwrap();
        let d = 2f64.sqrt();
        assert!((sms("a.", "b.", &tp).unwrap() - 1.0 / (1.0 + d)).abs() < 1e-15);
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_sentences("Stop. Wait! Go?"), vec![toks("stop"), toks("wait"), toks("go")]);
        assert_eq!(split_sentences("no terminator"), vec![toks("no terminator")]);
        assert!(split_sentences("...").is_empty());
        assert!(sms("...", "a", &HashProvider::new(0, 4)).is_err());
    }

    #[test]
    fn rescaling() {
        let s = BertScore { p: 0.5, r: 0.5, f1: 0.5 }.rescaled(0.5).unwrap();
        assert_eq!((s.p, s.r, s.f1), (0.0, 0.0, 0.0));
        assert!(BertScore { p: 0.5, r: 0.5, f1: 0.5 }.rescaled(1.0).is_err());
    }

    #[test]
    fn empty_sides_rejected() {
        let p = HashProvider::new(0, 4);
        assert!(bertscore(&[], &toks("a"), &p).is_err());
        assert!(sbert_cos("", "a", &p).is_err());
    }
}
