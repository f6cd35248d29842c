//! Keyword-set ingestion and the sorted, padded, length-bucketed index.
//!
//! The constraint set is materialized as a small number of matrices, one
//! per length bucket. Rows are keywords padded to the bucket width with a
//! reserved pad cell and sorted lexicographically. The pad cell compares
//! less than every token id, so padded-row order agrees with
//! true-sequence order (a prefix sorts before its extensions), which the
//! verifier's binary-search correctness argument requires.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{lex_compare, TokenSeq, Vocabulary};

/// Reserved pad cell. Encoded as all-ones on disk; never a valid token.
pub const PAD_CELL: u32 = u32::MAX;

const MAGIC: &[u8; 8] = b"CDKIDX1\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty constraint set")]
    EmptySet,
    #[error("keyword {index} is empty")]
    EmptySequence { index: usize },
    #[error("token {token} out of range for vocabulary of size {vocab_size} (keyword {index})")]
    TokenOutOfRange {
        token: u32,
        vocab_size: u32,
        index: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad index file: {0}")]
    Format(String),
    #[error("corrupt index file: {0}")]
    Corruption(String),
}

/// A deduplicated set of non-empty keyword sequences over one vocabulary.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    /// Sorted lexicographically, no duplicates.
    sequences: Vec<TokenSeq>,
    vocab: Vocabulary,
}

impl ConstraintSet {
    /// Builds a set from arbitrary keyword order. Duplicates are silently
    /// dropped; empty keywords and out-of-range tokens are rejected.
    pub fn new(
        sequences: impl IntoIterator<Item = TokenSeq>,
        vocab: Vocabulary,
    ) -> Result<Self, CorpusError> {
        assert!(vocab.size() < PAD_CELL, "vocabulary too large for pad encoding");
        let mut seqs: Vec<TokenSeq> = Vec::new();
        for (index, s) in sequences.into_iter().enumerate() {
            if s.is_empty() {
                return Err(CorpusError::EmptySequence { index });
            }
            if let Some(t) = s.tokens().iter().find(|t| !vocab.contains(**t)) {
                return Err(CorpusError::TokenOutOfRange {
                    token: t.0,
                    vocab_size: vocab.size(),
                    index,
                });
            }
            seqs.push(s);
        }
        seqs.sort_by(lex_compare);
        seqs.dedup();
        Ok(ConstraintSet { sequences: seqs, vocab })
    }

    /// Parses the keyword text format: one keyword per line, tokens as
    /// space-separated decimal integers. Blank lines are ignored. When
    /// `vocab_size` is `None` the vocabulary is inferred as max id + 1.
    pub fn from_text(text: &str, vocab_size: Option<u32>) -> Result<Self, CorpusError> {
        let mut seqs = Vec::new();
        let mut max_id = 0u32;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut ids = Vec::new();
            for tok in trimmed.split_whitespace() {
                let id: u32 = tok.parse().map_err(|_| CorpusError::Parse {
                    line,
                    message: format!("invalid token {tok:?}"),
                })?;
                if let Some(v) = vocab_size {
                    if id >= v {
                        return Err(CorpusError::Parse {
                            line,
                            message: format!("token {id} out of range for vocabulary of size {v}"),
                        });
                    }
                }
                max_id = max_id.max(id);
                ids.push(id);
            }
            seqs.push(TokenSeq::from(ids));
        }
        if seqs.is_empty() {
            return Err(CorpusError::EmptySet);
        }
        let vocab = Vocabulary::new(vocab_size.unwrap_or(max_id + 1));
        ConstraintSet::new(seqs, vocab)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Members in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = &TokenSeq> {
        self.sequences.iter()
    }

    pub fn contains(&self, seq: &TokenSeq) -> bool {
        self.sequences.binary_search_by(|s| lex_compare(s, seq)).is_ok()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(TokenSeq::len).max().unwrap_or(0)
    }

    /// True iff no member is a proper prefix of another. After sorting, a
    /// proper prefix is immediately followed by one of its extensions, so
    /// checking adjacent pairs suffices.
    pub fn is_prefix_free(&self) -> bool {
        self.sequences
            .windows(2)
            .all(|w| !(w[0].len() < w[1].len() && w[0].is_prefix_of(&w[1])))
    }
}

/// How keyword lengths are grouped into padded matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketPolicy {
    /// Length ranges [1], [2,3], [4,7], [8,15], ... Bounds worst-case
    /// padding waste below 50%.
    PowerOfTwo,
    /// One bucket padded to the global maximum length.
    Single,
}

impl std::str::FromStr for BucketPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pow2" => Ok(BucketPolicy::PowerOfTwo),
            "single" => Ok(BucketPolicy::Single),
            other => Err(format!("unknown bucket policy {other:?} (expected pow2|single)")),
        }
    }
}

/// One padded matrix of keywords whose lengths fall in
/// `[min_len, max_len]`. Rows are sorted; cells beyond a row's true
/// length hold [`PAD_CELL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    width: u32,
    min_len: u32,
    max_len: u32,
    true_lengths: Vec<u32>,
    cells: Vec<u32>,
}

impl Bucket {
    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn count(&self) -> usize {
        self.true_lengths.len()
    }

    pub fn min_len(&self) -> u32 {
        self.min_len
    }

    pub fn max_len(&self) -> u32 {
        self.max_len
    }

    pub fn true_length(&self, row: usize) -> usize {
        self.true_lengths[row] as usize
    }

    pub fn row(&self, row: usize) -> &[u32] {
        let w = self.width as usize;
        &self.cells[row * w..(row + 1) * w]
    }

    /// The row as a true-length token sequence.
    pub fn row_seq(&self, row: usize) -> TokenSeq {
        TokenSeq::from(self.row(row)[..self.true_length(row)].to_vec())
    }
}

/// Pad-lowest cell order: the pad cell sorts before every token id.
#[inline]
pub fn cell_cmp(a: u32, b: u32) -> Ordering {
    let key = |c: u32| if c == PAD_CELL { 0u64 } else { c as u64 + 1 };
    key(a).cmp(&key(b))
}

/// Pad-lowest lexicographic order on equal-width rows.
pub fn row_cmp(a: &[u32], b: &[u32]) -> Ordering {
    for (&x, &y) in a.iter().zip(b) {
        match cell_cmp(x, y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// The sorted, padded, length-bucketed encoding of a constraint set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedIndex {
    buckets: Vec<Bucket>,
    vocab_size: u32,
    total_count: usize,
    prefix_free: bool,
}

impl SortedIndex {
    pub fn build(set: &ConstraintSet, policy: BucketPolicy) -> Result<Self, CorpusError> {
        if set.is_empty() {
            return Err(CorpusError::EmptySet);
        }
        let global_max = set.max_len() as u32;
        let bucket_id = |len: u32| -> u32 {
            match policy {
                BucketPolicy::Single => 0,
                BucketPolicy::PowerOfTwo => len.ilog2(),
            }
        };

        let mut groups: Vec<(u32, Vec<&TokenSeq>)> = Vec::new();
        for seq in set.iter() {
            let id = bucket_id(seq.len() as u32);
            match groups.iter_mut().find(|(g, _)| *g == id) {
                Some((_, rows)) => rows.push(seq),
                None => groups.push((id, vec![seq])),
            }
        }
        groups.sort_by_key(|(id, _)| *id);

        let mut buckets = Vec::with_capacity(groups.len());
        for (_, rows) in groups {
            // Input order is the set's global lex order, which restricted
            // to one bucket is still sorted; with the pad-lowest cell
            // order, padded rows inherit it.
            let width = match policy {
                BucketPolicy::Single => global_max,
                BucketPolicy::PowerOfTwo => {
                    rows.iter().map(|s| s.len() as u32).max().unwrap()
                }
            };
            let mut cells = Vec::with_capacity(rows.len() * width as usize);
            let mut true_lengths = Vec::with_capacity(rows.len());
            let mut min_len = u32::MAX;
            let mut max_len = 0u32;
            for seq in rows {
                let len = seq.len() as u32;
                min_len = min_len.min(len);
                max_len = max_len.max(len);
                true_lengths.push(len);
                cells.extend(seq.tokens().iter().map(|t| t.0));
                cells.extend(std::iter::repeat_n(PAD_CELL, (width - len) as usize));
            }
            buckets.push(Bucket {
                width,
                min_len,
                max_len,
                true_lengths,
                cells,
            });
        }

        Ok(SortedIndex {
            buckets,
            vocab_size: set.vocab().size(),
            total_count: set.len(),
            prefix_free: set.is_prefix_free(),
        })
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    pub fn prefix_free(&self) -> bool {
        self.prefix_free
    }

    /// Length of the longest keyword in the index.
    pub fn max_keyword_len(&self) -> usize {
        self.buckets.iter().map(|b| b.max_len as usize).max().unwrap_or(0)
    }

    /// All members, bucket-major (not globally sorted).
    pub fn iter_members(&self) -> impl Iterator<Item = TokenSeq> + '_ {
        self.buckets
            .iter()
            .flat_map(|b| (0..b.count()).map(move |i| b.row_seq(i)))
    }

    /// Reconstructs the constraint set this index encodes.
    pub fn to_constraint_set(&self) -> ConstraintSet {
        ConstraintSet::new(self.iter_members(), Vocabulary::new(self.vocab_size))
            .expect("a valid index encodes a valid set")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PersistError> {
        let file = File::create(path)?;
        let mut w = HashingWriter::new(BufWriter::new(file));
        w.write_all(MAGIC)?;
        w.write_u32(VERSION)?;
        w.write_u32(self.vocab_size)?;
        w.write_u32(self.buckets.len() as u32)?;
        for b in &self.buckets {
            w.write_u32(b.width)?;
            w.write_u32(b.count() as u32)?;
            w.write_u32(b.min_len)?;
            w.write_u32(b.max_len)?;
            for &l in &b.true_lengths {
                w.write_u32(l)?;
            }
            for &c in &b.cells {
                w.write_u32(c)?;
            }
        }
        let checksum = w.checksum();
        let mut inner = w.into_inner();
        inner.write_all(&checksum.to_le_bytes())?;
        inner.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PersistError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(PersistError::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(PersistError::Format("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(PersistError::Format("bad magic".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(PersistError::Format(format!("unsupported version {version}")));
        }
        let vocab_size = r.read_u32()?;
        if vocab_size == 0 || vocab_size == PAD_CELL {
            return Err(PersistError::Format(format!("bad vocab size {vocab_size}")));
        }
        let bucket_count = r.read_u32()?;
        let mut buckets = Vec::new();
        let mut total_count = 0usize;
        for _ in 0..bucket_count {
            let width = r.read_u32()?;
            let count = r.read_u32()? as usize;
            let min_len = r.read_u32()?;
            let max_len = r.read_u32()?;
            if width == 0 || min_len == 0 || min_len > max_len || max_len > width {
                return Err(PersistError::Corruption(
                    "inconsistent bucket length metadata".into(),
                ));
            }
            let mut true_lengths = Vec::with_capacity(count);
            for _ in 0..count {
                true_lengths.push(r.read_u32()?);
            }
            let mut cells = vec![0u32; count * width as usize];
            for c in cells.iter_mut() {
                *c = r.read_u32()?;
            }
            let bucket = Bucket {
                width,
                min_len,
                max_len,
                true_lengths,
                cells,
            };
            validate_bucket(&bucket, vocab_size)?;
            total_count += bucket.count();
            buckets.push(bucket);
        }
        if r.pos != body.len() {
            return Err(PersistError::Format("trailing bytes".into()));
        }
        for w in buckets.windows(2) {
            if w[0].max_len >= w[1].min_len {
                return Err(PersistError::Corruption(
                    "bucket length ranges overlap or are out of order".into(),
                ));
            }
        }
        let prefix_free = merged_scan_prefix_free(&buckets);
        Ok(SortedIndex {
            buckets,
            vocab_size,
            total_count,
            prefix_free,
        })
    }
}

fn validate_bucket(b: &Bucket, vocab_size: u32) -> Result<(), PersistError> {
    for row in 0..b.count() {
        let len = b.true_lengths[row];
        if len < b.min_len || len > b.max_len {
            return Err(PersistError::Corruption(format!(
                "row {row} true length {len} outside bucket range"
            )));
        }
        let cells = b.row(row);
        for (i, &c) in cells.iter().enumerate() {
            if (i as u32) < len {
                if c == PAD_CELL || c >= vocab_size {
                    return Err(PersistError::Corruption(format!(
                        "row {row} cell {i} holds invalid token {c}"
                    )));
                }
            } else if c != PAD_CELL {
                return Err(PersistError::Corruption(format!(
                    "row {row} cell {i} should be padding"
                )));
            }
        }
        if row > 0 && row_cmp(b.row(row - 1), cells) != Ordering::Less {
            return Err(PersistError::Corruption(format!(
                "sort-order violation at row {row}"
            )));
        }
    }
    Ok(())
}

/// Prefix-freeness over all buckets: merge the per-bucket sorted streams
/// and check each member against its global successor. In sorted order a
/// proper prefix is immediately followed by one of its extensions.
fn merged_scan_prefix_free(buckets: &[Bucket]) -> bool {
    let mut cursors: Vec<(usize, usize)> = (0..buckets.len()).map(|b| (b, 0)).collect();
    let mut prev: Option<TokenSeq> = None;
    loop {
        let mut best: Option<(usize, TokenSeq)> = None;
        for (ci, &(b, row)) in cursors.iter().enumerate() {
            if row >= buckets[b].count() {
                continue;
            }
            let seq = buckets[b].row_seq(row);
            match &best {
                Some((_, s)) if lex_compare(&seq, s) != Ordering::Less => {}
                _ => best = Some((ci, seq)),
            }
        }
        let Some((ci, seq)) = best else {
            return true;
        };
        cursors[ci].1 += 1;
        if let Some(p) = &prev {
            if p.len() < seq.len() && p.is_prefix_of(&seq) {
                return false;
            }
        }
        prev = Some(seq);
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: u64,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        for &b in bytes {
            self.hash ^= b as u64;
            self.hash = self.hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.inner.write_all(bytes)
    }

    fn write_u32(&mut self, v: u32) -> std::io::Result<()> {
        self.write_all(&v.to_le_bytes())
    }

    fn checksum(&self) -> u64 {
        self.hash
    }

    fn into_inner(self) -> W {
        self.inner
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.bytes.len() {
            return Err(PersistError::Format("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
