//! Token, vocabulary, and sequence primitives.
//!
//! The total order on [`TokenId`] is plain integer order, and
//! [`lex_compare`] extends it to sequences with the convention that a
//! proper prefix sorts before any of its extensions. The sorted keyword
//! index and its binary search are only correct relative to this order.

use std::cmp::Ordering;
use std::fmt;

/// A token identifier in `[0, vocab_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A fixed-size token vocabulary, optionally carrying display strings
/// for debugging and text ingestion.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    size: u32,
    names: Option<Vec<String>>,
}

impl Vocabulary {
    /// A vocabulary of `size` anonymous tokens. `size` must be >= 1.
    pub fn new(size: u32) -> Self {
        assert!(size >= 1, "vocabulary must contain at least one token");
        Vocabulary { size, names: None }
    }

    /// A vocabulary whose tokens carry display strings. Names must be unique.
    pub fn with_names(names: Vec<String>) -> Self {
        assert!(!names.is_empty(), "vocabulary must contain at least one token");
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            assert!(seen.insert(n.as_str()), "duplicate token name {n:?}");
        }
        Vocabulary {
            size: names.len() as u32,
            names: Some(names),
        }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token.0 < self.size
    }

    pub fn name(&self, token: TokenId) -> Option<&str> {
        self.names.as_ref()?.get(token.0 as usize).map(String::as_str)
    }
}

/// An ordered sequence of tokens. The empty sequence is the
/// beginning-of-keyword state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }

    pub fn empty() -> Self {
        TokenSeq(Vec::new())
    }

    /// Convenience constructor from raw ids.
    pub fn from_ids(ids: &[u32]) -> Self {
        TokenSeq(ids.iter().copied().map(TokenId).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn get(&self, idx: usize) -> Option<TokenId> {
        self.0.get(idx).copied()
    }

    pub fn push(&mut self, token: TokenId) {
        self.0.push(token);
    }

    /// New sequence with `token` appended.
    pub fn extended(&self, token: TokenId) -> TokenSeq {
        let mut v = self.0.clone();
        v.push(token);
        TokenSeq(v)
    }

    /// The first `len` tokens as a new sequence.
    pub fn prefix(&self, len: usize) -> TokenSeq {
        TokenSeq(self.0[..len].to_vec())
    }

    pub fn valid_for(&self, vocab: &Vocabulary) -> bool {
        self.0.iter().all(|t| vocab.contains(*t))
    }

    /// True iff `self` is a (not necessarily proper) prefix of `other`.
    pub fn is_prefix_of(&self, other: &TokenSeq) -> bool {
        self.0.len() <= other.0.len() && self.0 == other.0[..self.0.len()]
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.0 {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids.into_iter().map(TokenId).collect())
    }
}

/// Sequence lexicographic order under the vocabulary's token order.
/// A proper prefix compares less than any of its extensions.
pub fn lex_compare(a: &TokenSeq, b: &TokenSeq) -> Ordering {
    for (x, y) in a.tokens().iter().zip(b.tokens()) {
        match x.cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// True iff `a` is a prefix of `b` (the empty sequence is a prefix of
/// everything; a sequence is a prefix of itself).
pub fn is_prefix(a: &TokenSeq, b: &TokenSeq) -> bool {
    a.is_prefix_of(b)
}

impl PartialOrd for TokenSeq {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TokenSeq {
    fn cmp(&self, other: &Self) -> Ordering {
        lex_compare(self, other)
    }
}
