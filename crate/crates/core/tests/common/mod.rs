//! Reference implementations shared by the integration tests. Each one is
//! written independently of the library code it checks.

#![allow(dead_code)]

use esocialnav::data::{
    build_sft_example, fixture_corpus, DialogSample, TokenizedSample, Tokenizer, IMAGE_ID,
};
use esocialnav::image::Image;
use esocialnav::model::{assemble_context, AssembledContext, ModelConfig, ModelState};
use esocialnav::train::SftExample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a floor on the denominator so two near-zero values
/// do not blow up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- fixtures

pub fn vocab_for(samples: &[DialogSample], cap: usize) -> Tokenizer {
    let texts: Vec<&str> = samples
        .iter()
        .flat_map(|s| s.turns.iter().flat_map(|t| [t.user.as_str(), t.assistant.as_str()]))
        .collect();
    Tokenizer::build(texts, cap).unwrap()
}

pub struct Fixture {
    pub samples: Vec<DialogSample>,
    pub images: Vec<Image>,
    pub tok: Tokenizer,
}

pub fn fixture(n: usize, seed: u64, cfg: &ModelConfig) -> Fixture {
    let (samples, images) = fixture_corpus(n, seed);
    let tok = vocab_for(&samples, cfg.vocab_size);
    Fixture { samples, images, tok }
}

impl Fixture {
    pub fn tokenized(&self) -> Vec<TokenizedSample> {
        self.samples.iter().map(|s| build_sft_example(s, &self.tok).unwrap()).collect()
    }

    pub fn sft_examples(&self, cfg: &ModelConfig) -> Vec<SftExample> {
        self.tokenized()
            .iter()
            .zip(&self.images)
            .map(|(t, img)| SftExample::new(t, img, cfg).unwrap())
            .collect()
    }
}

/// Random single-placeholder context with a random image.
pub fn random_context(r: &mut ChaCha8Rng, cfg: &ModelConfig, len: usize) -> AssembledContext {
    let mut ids: Vec<u32> = (0..len).map(|_| r.random_range(5..cfg.vocab_size as u32)).collect();
    let at = r.random_range(0..len);
    ids[at] = IMAGE_ID;
    let n = 8;
    let px: Vec<f64> = (0..n * n * 3).map(|_| r.random::<f64>()).collect();
    let img = Image::new(n, n, px).unwrap();
    assemble_context(&ids, Some(&img), cfg.n_visual_tokens).unwrap()
}

// ------------------------------------------------------------- SFT oracle

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Masked per-token NLL computed straight from the raw token list and mask:
/// position arithmetic is redone here (the placeholder expands into
/// `n_visual_tokens` rows) and each logit row is normalized by hand.
pub fn sft_loss_oracle(state: &ModelState, samples: &[TokenizedSample], images: &[Image]) -> f64 {
    let nv = state.config.n_visual_tokens;
    let mut total = 0.0;
    for (s, img) in samples.iter().zip(images) {
        let ctx = assemble_context(&s.tokens, Some(img), nv).unwrap();
        let logits = state.forward_logits(&ctx).unwrap();
        let ph = s.tokens.iter().position(|&t| t == IMAGE_ID).unwrap();
        let mut nll = 0.0;
        let mut count = 0usize;
        for (i, (&t, &m)) in s.tokens.iter().zip(&s.mask).enumerate() {
            if !m {
                continue;
            }
            let pos = if i > ph { i + nv - 1 } else { i };
            nll -= log_softmax_at(logits.row(pos - 1), t as usize);
            count += 1;
        }
        total += nll / count as f64;
    }
    total / samples.len() as f64
}

// ------------------------------------------------------------- EMD oracle

/// Solves the square-or-tall system `m x = rhs` by Gaussian elimination.
/// Returns `None` when the columns are linearly dependent or the system is
/// inconsistent.
fn solve_columns(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>, k: usize) -> Option<Vec<f64>> {
    let rows = m.len();
    let mut piv_row = 0;
    let mut pivots = Vec::new();
    for col in 0..k {
        let best = (piv_row..rows).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[best][col].abs() < 1e-12 {
            return None;
        }
        m.swap(piv_row, best);
        rhs.swap(piv_row, best);
        for r in 0..rows {
            if r != piv_row && m[r][col] != 0.0 {
                let f = m[r][col] / m[piv_row][col];
                for c in 0..k {
                    m[r][c] -= f * m[piv_row][c];
                }
                rhs[r] -= f * rhs[piv_row];
            }
        }
        pivots.push(piv_row);
        piv_row += 1;
    }
    if (piv_row..rows).any(|r| rhs[r].abs() > 1e-9) {
        return None;
    }
    Some((0..k).map(|c| rhs[pivots[c]] / m[pivots[c]][c]).collect())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Minimum transport cost by enumerating every basis of `m + n - 1` cells
/// and keeping the feasible ones.
pub fn emd_oracle(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let k = m + n - 1;
    let mut best = f64::INFINITY;
    for cells in combinations(m * n, k) {
        let mut mat = vec![vec![0.0; k]; m + n];
        for (c, &cell) in cells.iter().enumerate() {
            mat[cell / n][c] = 1.0;
            mat[m + cell % n][c] = 1.0;
        }
        let rhs: Vec<f64> = a.iter().chain(b).copied().collect();
        let Some(x) = solve_columns(mat, rhs, k) else { continue };
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let c: f64 = cells.iter().zip(&x).map(|(&cell, &v)| v * cost[cell / n][cell % n]).sum();
        best = best.min(c);
    }
    best
}

/// Positive weights normalized to sum to one.
pub fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}
