use std::collections::HashMap;

use super::BaseLm;
use crate::{Corpus, Error, Result, TokenId};

#[derive(Debug, Clone, Default)]
struct HistoryCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

/// Additively smoothed n-gram model.
///
/// `p(w | c) = (count(h, w) + α) / (count(h) + α·V)` where `h` is the last
/// `order - 1` tokens of the bos-prefixed context and `V` excludes the bos
/// marker, which always gets probability 0.
#[derive(Debug, Clone)]
pub struct CountLm {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    bos_id: TokenId,
    counts: HashMap<Vec<TokenId>, HistoryCounts>,
}

impl CountLm {
    pub const DEFAULT_ORDER: usize = 3;
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn train(corpus: &Corpus, order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("smoothing constant must be positive, got {alpha}")));
        }
        let mut counts: HashMap<Vec<TokenId>, HistoryCounts> = HashMap::new();
        for pair in corpus.iter_pairs() {
            let slot = counts.entry(history(pair.context, order).to_vec()).or_default();
            slot.total += 1;
            *slot.next.entry(pair.target).or_default() += 1;
        }
        Ok(CountLm {
            order,
            alpha,
            vocab_size: corpus.vocab().len(),
            bos_id: corpus.vocab().bos_id(),
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn history(context: &[TokenId], order: usize) -> &[TokenId] {
    &context[context.len().saturating_sub(order - 1)..]
}

impl BaseLm for CountLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prob(&self, context: &[TokenId]) -> Vec<f64> {
        let support = (self.vocab_size - 1) as f64;
        let slot = self.counts.get(history(context, self.order));
        let total = slot.map_or(0, |s| s.total) as f64;
        let denom = total + self.alpha * support;
        let mut probs = vec![self.alpha / denom; self.vocab_size];
        probs[self.bos_id as usize] = 0.0;
        if let Some(slot) = slot {
            for (&w, &c) in &slot.next {
                probs[w as usize] = (c as f64 + self.alpha) / denom;
            }
        }
        probs
    }
}
