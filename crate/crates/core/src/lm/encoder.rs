use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ContextEncoder;
use crate::{Error, Result, TokenId};

/// Exponentially decayed sum of token embeddings over the last `window`
/// tokens, normalized to unit length:
///
/// `f(c) = normalize(Σ_{j=1..min(m,|c|)} γ^(j-1) · E[c[|c|-j]])`
///
/// Two contexts that share their last `window` tokens encode identically.
#[derive(Debug, Clone)]
pub struct DecayEncoder {
    table: Vec<f32>,
    vocab_size: usize,
    dim: usize,
    decay: f64,
    window: usize,
}

impl DecayEncoder {
    pub const DEFAULT_DIM: usize = 16;
    pub const DEFAULT_DECAY: f64 = 0.5;
    pub const DEFAULT_WINDOW: usize = 8;

    /// Draws a `vocab_size × dim` standard-normal embedding table from `seed`.
    pub fn new(vocab_size: usize, dim: usize, decay: f64, window: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::from_table(table, vocab_size, dim, decay, window)
    }

    pub fn from_table(table: Vec<f32>, vocab_size: usize, dim: usize, decay: f64, window: usize) -> Result<Self> {
        if dim == 0 || window == 0 {
            return Err(Error::invalid("encoder dim and window must be positive"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1), got {decay}")));
        }
        if table.len() != vocab_size * dim {
            return Err(Error::DimensionMismatch { expected: vocab_size * dim, actual: table.len() });
        }
        Ok(DecayEncoder { table, vocab_size, dim, decay, window })
    }

    pub fn embedding(&self, id: TokenId) -> &[f32] {
        let i = id as usize;
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

impl ContextEncoder for DecayEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, context: &[TokenId]) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        let mut weight = 1.0;
        for &id in context.iter().rev().take(self.window) {
            for (a, &e) in acc.iter_mut().zip(self.embedding(id)) {
                *a += weight * e as f64;
            }
            weight *= self.decay;
        }
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter().map(|a| (a / norm) as f32).collect()
        } else {
            vec![0.0; self.dim]
        }
    }
}
