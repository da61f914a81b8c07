use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{derive_seed, Tokenizer};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Pure token → vector map of fixed width.
pub trait EmbeddingProvider {
    /// Stable name recorded in report fingerprints.
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn token_vector(&self, token: &str) -> Result<Vec<f64>>;

    /// Mean of the token vectors.
    fn sentence_vector(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("sentence vector of empty token list"));
        }
        let mut acc = vec![0.0; self.dim()];
        for t in tokens {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)?) {
                *a += x;
            }
        }
        let k = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

/// Seeded pseudo-random vectors keyed by a hash of the token.
#[derive(Clone, Debug)]
pub struct HashProvider {
    seed: u64,
    dim: usize,
    one_hot: bool,
}

impl HashProvider {
    /// Gaussian unit vectors.
    pub fn new(seed: u64, dim: usize) -> Self {
        HashProvider { seed, dim, one_hot: false }
    }

    /// Basis vectors at a hashed index; distinct tokens are orthogonal
    /// unless their indices collide.
    pub fn one_hot(seed: u64, dim: usize) -> Self {
        HashProvider { seed, dim, one_hot: true }
    }

    pub fn index_of(&self, token: &str) -> usize {
        (derive_seed(self.seed, token) % self.dim as u64) as usize
    }
}

impl EmbeddingProvider for HashProvider {
    fn name(&self) -> String {
        let kind = if self.one_hot { "hash-onehot" } else { "hash" };
        format!("{kind}(seed={},dim={})", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Result<Vec<f64>> {
        if self.one_hot {
            let mut v = vec![0.0; self.dim];
            v[self.index_of(token)] = 1.0;
            return Ok(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Rows of a trained model's token embedding table.
#[derive(Clone, Debug)]
pub struct ModelEmbeddingProvider {
    tokenizer: Tokenizer,
    table: Tensor,
}

impl ModelEmbeddingProvider {
    pub fn new(state: &ModelState, tokenizer: Tokenizer) -> Result<Self> {
        let table = state.param("lm.wte").ok_or_else(|| Error::invalid("model has no embedding table"))?.clone();
        if tokenizer.len() > table.shape()[0] {
            return Err(Error::invalid(format!(
                "tokenizer has {} entries but the embedding table only {}",
                tokenizer.len(),
                table.shape()[0]
            )));
        }
        Ok(ModelEmbeddingProvider { tokenizer, table })
    }
}

impl EmbeddingProvider for ModelEmbeddingProvider {
    fn name(&self) -> String {
        format!("model(vocab={},dim={})", self.tokenizer.len(), self.dim())
    }

    fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn token_vector(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self.table.row(self.tokenizer.id(token) as usize).to_vec())
    }
}

/// Explicit token vectors; unknown tokens are an error.
#[derive(Clone, Debug)]
pub struct TableProvider {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl TableProvider {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if dim == 0 || vectors.values().any(|v| v.len() != dim) {
            return Err(Error::invalid("table provider needs non-empty vectors of equal width"));
        }
        Ok(TableProvider { dim, vectors })
    }
}

impl EmbeddingProvider for TableProvider {
    fn name(&self) -> String {
        format!("table(n={},dim={})", self.vectors.len(), self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(token)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no vector for token {token:?}")))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; a zero-norm side is an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
