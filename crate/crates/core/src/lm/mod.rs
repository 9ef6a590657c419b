//! The context encoder `f: Σ* → R^d` and the base language model `p_LM`.
//!
//! Both are traits so that a neural implementation can be dropped in; the
//! crate ships deterministic, training-free reference implementations.

mod count;
mod encoder;

pub use count::CountLm;
pub use encoder::DecayEncoder;

use crate::TokenId;

/// Maps a (bos-prefixed) context to a fixed-length key vector.
pub trait ContextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of token ids the encoder accepts.
    fn vocab_size(&self) -> usize;

    /// Must be pure: identical contexts yield bitwise-identical vectors.
    fn encode(&self, context: &[TokenId]) -> Vec<f32>;
}

/// Next-token distribution of the base language model.
pub trait BaseLm: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// `p_LM(· | context)` as a dense vector over the vocabulary.
    fn prob(&self, context: &[TokenId]) -> Vec<f64>;
}

impl<T: ContextEncoder + ?Sized> ContextEncoder for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn encode(&self, context: &[TokenId]) -> Vec<f32> {
        (**self).encode(context)
    }
}

impl<T: BaseLm + ?Sized> BaseLm for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn prob(&self, context: &[TokenId]) -> Vec<f64> {
        (**self).prob(context)
    }
}
