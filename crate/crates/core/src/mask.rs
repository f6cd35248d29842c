//! Vocabulary-sized validity bitmask.

use crate::types::TokenId;

/// A dense bitmask over the vocabulary marking which tokens validly
/// extend the queried prefix, plus a flag allowing the end-of-keyword
/// step. `eok_allowed` is true only when the queried prefix is itself a
/// complete keyword.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    words: Vec<u64>,
    vocab_size: u32,
    eok_allowed: bool,
}

impl Mask {
    /// An all-zero mask with end-of-keyword disallowed.
    pub fn none(vocab_size: u32) -> Self {
        let words = vec![0u64; (vocab_size as usize).div_ceil(64)];
        Mask {
            words,
            vocab_size,
            eok_allowed: false,
        }
    }

    pub fn from_tokens(vocab_size: u32, tokens: &[TokenId]) -> Self {
        let mut m = Mask::none(vocab_size);
        for &t in tokens {
            m.allow(t);
        }
        m
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn allow(&mut self, token: TokenId) {
        assert!(token.0 < self.vocab_size, "token {token} out of range");
        self.words[token.0 as usize / 64] |= 1u64 << (token.0 % 64);
    }

    pub fn is_allowed(&self, token: TokenId) -> bool {
        if token.0 >= self.vocab_size {
            return false;
        }
        (self.words[token.0 as usize / 64] >> (token.0 % 64)) & 1 == 1
    }

    pub fn set_eok(&mut self, allowed: bool) {
        self.eok_allowed = allowed;
    }

    pub fn eok_allowed(&self) -> bool {
        self.eok_allowed
    }

    pub fn count_allowed(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Allowed tokens in ascending id order.
    pub fn allowed_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros();
                bits &= bits - 1;
                Some(TokenId(i as u32 * 64 + b))
            })
        })
    }

    /// `self` restricted to the given candidate list (used by the
    /// monotone-restriction property tests).
    pub fn restricted_to(&self, candidates: &[TokenId]) -> Mask {
        let mut m = Mask::none(self.vocab_size);
        for &t in candidates {
            if self.is_allowed(t) {
                m.allow(t);
            }
        }
        m.set_eok(self.eok_allowed);
        m
    }
}
