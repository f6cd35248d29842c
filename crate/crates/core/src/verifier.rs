//! Prefix verification: which candidate tokens validly extend a prefix.
//!
//! The primary path answers per-candidate queries with a binary search
//! over the sorted padded index; a reference trie provides the same
//! contract as correctness oracle and performance baseline. Candidate
//! searches are independent of one another, so batches can be fanned out
//! across workers freely.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{row_cmp, Bucket, ConstraintSet, PersistError, SortedIndex};
use crate::mask::Mask;
use crate::types::{TokenId, TokenSeq};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("prefix too long: length {prefix_len} not below the longest keyword length {max_len}")]
    PrefixTooLong { prefix_len: usize, max_len: usize },
}

/// Instrumentation for the search-cost bound: one row comparison per
/// binary-search iteration.
#[derive(Debug, Default, Clone, Copy)]
pub struct VerifyStats {
    pub row_comparisons: u64,
}

/// Worst-case row comparisons for a single candidate: the binary-search
/// bound summed over buckets.
pub fn comparison_bound(idx: &SortedIndex) -> u64 {
    idx.buckets()
        .iter()
        .map(|b| (b.count() as u64 + 1).next_power_of_two().trailing_zeros() as u64)
        .sum()
}

/// Marks candidate `t` valid iff `prefix + [t]` is a prefix of some
/// member of the indexed set. Tokens outside `candidates` are reported
/// invalid. `eok_allowed` is set iff the prefix itself is a member.
pub fn ppv_verify(
    idx: &SortedIndex,
    prefix: &TokenSeq,
    candidates: &[TokenId],
) -> Result<Mask, VerifyError> {
    ppv_verify_with_stats(idx, prefix, candidates).map(|(m, _)| m)
}

pub fn ppv_verify_with_stats(
    idx: &SortedIndex,
    prefix: &TokenSeq,
    candidates: &[TokenId],
) -> Result<(Mask, VerifyStats), VerifyError> {
    let max_len = idx.max_keyword_len();
    if prefix.len() >= max_len {
        return Err(VerifyError::PrefixTooLong {
            prefix_len: prefix.len(),
            max_len,
        });
    }
    let width = prefix.len() + 1;
    let mut query: Vec<u32> = prefix.tokens().iter().map(|t| t.0).collect();
    query.push(0);
    let mut mask = Mask::none(idx.vocab_size());
    let mut stats = VerifyStats::default();
    for &cand in candidates {
        query[width - 1] = cand.0;
        for bucket in idx.buckets() {
            if (bucket.max_len() as usize) < width {
                continue;
            }
            let (row, cmps) = lower_bound_truncated(bucket, &query);
            stats.row_comparisons += cmps;
            if row < bucket.count() && &bucket.row(row)[..width] == query.as_slice() {
                mask.allow(cand);
                break;
            }
        }
    }
    mask.set_eok(is_member(idx, prefix));
    Ok((mask, stats))
}

/// [`ppv_verify`] with the whole vocabulary as candidates.
pub fn full_valid_set(idx: &SortedIndex, prefix: &TokenSeq) -> Result<Mask, VerifyError> {
    let all: Vec<TokenId> = (0..idx.vocab_size()).map(TokenId).collect();
    ppv_verify(idx, prefix, &all)
}

/// True iff `seq` is a member of the indexed set.
pub fn is_member(idx: &SortedIndex, seq: &TokenSeq) -> bool {
    if seq.is_empty() {
        return false;
    }
    let len = seq.len() as u32;
    let query: Vec<u32> = seq.tokens().iter().map(|t| t.0).collect();
    for bucket in idx.buckets() {
        if len < bucket.min_len() || len > bucket.max_len() {
            continue;
        }
        let (row, _) = lower_bound_truncated(bucket, &query);
        if row < bucket.count()
            && &bucket.row(row)[..query.len()] == query.as_slice()
            && bucket.true_length(row) == seq.len()
        {
            return true;
        }
    }
    false
}

/// First row whose truncation to the query width compares >= the query,
/// with half-open bounds [low, high). Returns (row, comparisons).
fn lower_bound_truncated(bucket: &Bucket, query: &[u32]) -> (usize, u64) {
    let w = query.len();
    let mut low = 0usize;
    let mut high = bucket.count();
    let mut cmps = 0u64;
    while low < high {
        let mid = (low + high) / 2;
        cmps += 1;
        if row_cmp(&bucket.row(mid)[..w], query) == Ordering::Less {
            low = mid + 1;
        } else {
            high = mid;
        }
    }
    (low, cmps)
}

/// Full-row variant: pads the query to the bucket width (pad cells sort
/// lowest) and compares whole rows. Must locate the same row as the
/// truncated search; kept for differential testing.
#[allow(dead_code)]
fn lower_bound_full_row(bucket: &Bucket, query: &[u32]) -> usize {
    let mut padded = query.to_vec();
    padded.resize(bucket.width(), crate::corpus::PAD_CELL);
    let mut low = 0usize;
    let mut high = bucket.count();
    while low < high {
        let mid = (low + high) / 2;
        if row_cmp(bucket.row(mid), &padded) == Ordering::Less {
            low = mid + 1;
        } else {
            high = mid;
        }
    }
    low
}

/// The reference prefix tree. A root-to-node path spells a prefix of the
/// set; terminal flags mark exactly the members.
#[derive(Debug, Clone)]
pub struct Trie {
    nodes: Vec<TrieNode>,
    vocab_size: u32,
    max_keyword_len: usize,
}

#[derive(Debug, Clone)]
struct TrieNode {
    /// (token, child index), ascending by token.
    children: Vec<(u32, u32)>,
    terminal: bool,
}

impl Trie {
    pub fn build(set: &ConstraintSet) -> Trie {
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            terminal: false,
        }];
        let mut max_keyword_len = 0;
        // Members arrive in lexicographic order, so a shared prefix is
        // always the rightmost existing path and children append in
        // ascending token order.
        for seq in set.iter() {
            max_keyword_len = max_keyword_len.max(seq.len());
            let mut node = 0usize;
            for t in seq.tokens() {
                let next = match nodes[node].children.last() {
                    Some(&(tok, child)) if tok == t.0 => child as usize,
                    _ => {
                        let child = nodes.len();
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            terminal: false,
                        });
                        nodes[node].children.push((t.0, child as u32));
                        child
                    }
                };
                node = next;
            }
            nodes[node].terminal = true;
        }
        Trie {
            nodes,
            vocab_size: set.vocab().size(),
            max_keyword_len,
        }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn max_keyword_len(&self) -> usize {
        self.max_keyword_len
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn walk(&self, prefix: &TokenSeq) -> Option<usize> {
        let mut node = 0usize;
        for t in prefix.tokens() {
            let children = &self.nodes[node].children;
            let i = children.binary_search_by_key(&t.0, |&(tok, _)| tok).ok()?;
            node = children[i].1 as usize;
        }
        Some(node)
    }

    /// Same contract as [`ppv_verify`].
    pub fn verify(
        &self,
        prefix: &TokenSeq,
        candidates: &[TokenId],
    ) -> Result<Mask, VerifyError> {
        if prefix.len() >= self.max_keyword_len {
            return Err(VerifyError::PrefixTooLong {
                prefix_len: prefix.len(),
                max_len: self.max_keyword_len,
            });
        }
        let mut mask = Mask::none(self.vocab_size);
        match self.walk(prefix) {
            Some(node) => {
                for &cand in candidates {
                    let children = &self.nodes[node].children;
                    if children.binary_search_by_key(&cand.0, |&(t, _)| t).is_ok() {
                        mask.allow(cand);
                    }
                }
                mask.set_eok(self.nodes[node].terminal && !prefix.is_empty());
            }
            None => mask.set_eok(false),
        }
        Ok(mask)
    }

    pub fn full_valid_set(&self, prefix: &TokenSeq) -> Result<Mask, VerifyError> {
        let all: Vec<TokenId> = (0..self.vocab_size).map(TokenId).collect();
        self.verify(prefix, &all)
    }

    pub fn is_member(&self, seq: &TokenSeq) -> bool {
        if seq.is_empty() {
            return false;
        }
        self.walk(seq).map(|n| self.nodes[n].terminal).unwrap_or(false)
    }

    /// Serializes as deliberately naive nested JSON maps, children keyed
    /// by decimal token id.
    pub fn write_json(&self, w: impl Write) -> Result<(), PersistError> {
        let file = TrieFileRef {
            vocab_size: self.vocab_size,
            root: NodeRef { trie: self, node: 0 },
        };
        serde_json::to_writer(w, &file).map_err(|e| PersistError::Format(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String, PersistError> {
        let mut out = Vec::new();
        self.write_json(&mut out)?;
        Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
    }

    pub fn read_json(r: impl Read) -> Result<Trie, PersistError> {
        let file: TrieFile =
            serde_json::from_reader(r).map_err(|e| PersistError::Format(e.to_string()))?;
        Trie::from_parsed(file)
    }

    pub fn from_json_str(s: &str) -> Result<Trie, PersistError> {
        let file: TrieFile =
            serde_json::from_str(s).map_err(|e| PersistError::Format(e.to_string()))?;
        Trie::from_parsed(file)
    }

    fn from_parsed(file: TrieFile) -> Result<Trie, PersistError> {
        let mut trie = Trie {
            nodes: Vec::new(),
            vocab_size: file.vocab_size,
            max_keyword_len: 0,
        };
        trie.convert(&file.root, 0)?;
        Ok(trie)
    }

    fn convert(&mut self, node: &JsonNode, depth: usize) -> Result<u32, PersistError> {
        let id = self.nodes.len() as u32;
        self.nodes.push(TrieNode {
            children: Vec::new(),
            terminal: node.terminal,
        });
        if node.terminal {
            self.max_keyword_len = self.max_keyword_len.max(depth);
        }
        let mut children = Vec::with_capacity(node.children.len());
        for (key, child) in &node.children {
            let token: u32 = key
                .parse()
                .map_err(|_| PersistError::Format(format!("bad child key {key:?}")))?;
            if token >= self.vocab_size {
                return Err(PersistError::Format(format!(
                    "child token {token} out of range for vocabulary of size {}",
                    self.vocab_size
                )));
            }
            let child_id = self.convert(child, depth + 1)?;
            children.push((token, child_id));
        }
        children.sort_by_key(|&(t, _)| t);
        self.nodes[id as usize].children = children;
        Ok(id)
    }
}

#[derive(Serialize)]
struct TrieFileRef<'a> {
    vocab_size: u32,
    root: NodeRef<'a>,
}

struct NodeRef<'a> {
    trie: &'a Trie,
    node: usize,
}

impl Serialize for NodeRef<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let node = &self.trie.nodes[self.node];
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("terminal", &node.terminal)?;
        map.serialize_entry(
            "children",
            &ChildrenRef {
                trie: self.trie,
                node: self.node,
            },
        )?;
        map.end()
    }
}

struct ChildrenRef<'a> {
    trie: &'a Trie,
    node: usize,
}

impl Serialize for ChildrenRef<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let children = &self.trie.nodes[self.node].children;
        let mut map = serializer.serialize_map(Some(children.len()))?;
        for &(token, child) in children {
            map.serialize_entry(
                &token.to_string(),
                &NodeRef {
                    trie: self.trie,
                    node: child as usize,
                },
            )?;
        }
        map.end()
    }
}

#[derive(Deserialize)]
struct TrieFile {
    vocab_size: u32,
    root: JsonNode,
}

#[derive(Deserialize)]
struct JsonNode {
    #[serde(default)]
    terminal: bool,
    #[serde(default)]
    children: BTreeMap<String, JsonNode>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BucketPolicy, ConstraintSet};
    use crate::types::Vocabulary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn set(seqs: &[&[u32]], vocab: u32) -> ConstraintSet {
        ConstraintSet::new(
            seqs.iter().map(|s| TokenSeq::from_ids(s)),
            Vocabulary::new(vocab),
        )
        .unwrap()
    }

    fn storefront() -> ConstraintSet {
        // soccer=0, used=1, gloves=2, shirts=3, shoes=4
        set(&[&[0, 2], &[1, 3], &[1, 0, 4]], 5)
    }

    fn ids(mask: &Mask) -> Vec<u32> {
        mask.allowed_tokens().map(|t| t.0).collect()
    }

    #[test]
    fn storefront_soccer_continues_with_gloves_only() {
        let idx = SortedIndex::build(&storefront(), BucketPolicy::PowerOfTwo).unwrap();
        let mask = ppv_verify(
            &idx,
            &TokenSeq::from_ids(&[0]),
            &[TokenId(2), TokenId(4)],
        )
        .unwrap();
        assert!(mask.is_allowed(TokenId(2)));
        assert!(!mask.is_allowed(TokenId(4)));
        assert!(!mask.eok_allowed());
    }

    #[test]
    fn everything_valid_at_root_when_set_covers_vocab() {
        let s = set(&[&[0], &[1], &[2]], 3);
        let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
        let mask = full_valid_set(&idx, &TokenSeq::empty()).unwrap();
        assert_eq!(ids(&mask), vec![0, 1, 2]);
        assert!(!mask.eok_allowed());
    }

    #[test]
    fn storefront_full_valid_sets() {
        let idx = SortedIndex::build(&storefront(), BucketPolicy::PowerOfTwo).unwrap();
        let used = full_valid_set(&idx, &TokenSeq::from_ids(&[1])).unwrap();
        assert_eq!(ids(&used), vec![0, 3]);
        let used_soccer = full_valid_set(&idx, &TokenSeq::from_ids(&[1, 0])).unwrap();
        assert_eq!(ids(&used_soccer), vec![4]);
    }

    #[test]
    fn leaf_member_allows_only_eok() {
        let s = set(&[&[1, 3], &[2, 2, 2]], 4);
        let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
        let mask = full_valid_set(&idx, &TokenSeq::from_ids(&[1, 3])).unwrap();
        assert_eq!(mask.count_allowed(), 0);
        assert!(mask.eok_allowed());
    }

    #[test]
    fn membership_queries() {
        let idx = SortedIndex::build(&storefront(), BucketPolicy::PowerOfTwo).unwrap();
        assert!(is_member(&idx, &TokenSeq::from_ids(&[1, 3])));
        assert!(is_member(&idx, &TokenSeq::from_ids(&[1, 0, 4])));
        assert!(!is_member(&idx, &TokenSeq::from_ids(&[1, 0])));
        assert!(!is_member(&idx, &TokenSeq::empty()));
    }

    #[test]
    fn random_membership_matches_set_lookup() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        for _ in 0..100 {
            let vocab = rng.gen_range(2..16);
            let s = random_set(&mut rng, vocab);
            let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
            for _ in 0..20 {
                let len = rng.gen_range(1..=s.max_len() + 1);
                let q = TokenSeq::from_ids(
                    &(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>(),
                );
                assert_eq!(is_member(&idx, &q), s.contains(&q));
            }
            for m in s.iter() {
                assert!(is_member(&idx, m));
            }
        }
    }

    #[test]
    fn prefix_too_long_is_an_error() {
        let idx = SortedIndex::build(&storefront(), BucketPolicy::PowerOfTwo).unwrap();
        let err = ppv_verify(&idx, &TokenSeq::from_ids(&[1, 0, 4]), &[TokenId(0)]);
        assert!(matches!(err, Err(VerifyError::PrefixTooLong { .. })));
        let trie = Trie::build(&storefront());
        assert!(matches!(
            trie.verify(&TokenSeq::from_ids(&[1, 0, 4]), &[TokenId(0)]),
            Err(VerifyError::PrefixTooLong { .. })
        ));
    }

    #[test]
    fn trie_handles_non_prefix_free_sets() {
        let trie = Trie::build(&set(&[&[1], &[1, 2]], 3));
        let mask = trie.verify(&TokenSeq::from_ids(&[1]), &[TokenId(2)]).unwrap();
        assert!(mask.is_allowed(TokenId(2)));
        assert!(mask.eok_allowed());
    }

    fn random_set(rng: &mut ChaCha12Rng, vocab: u32) -> ConstraintSet {
        let count = rng.gen_range(1..=200);
        let seqs: Vec<TokenSeq> = (0..count)
            .map(|_| {
                let len = rng.gen_range(1..=8);
                TokenSeq::from_ids(
                    &(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>(),
                )
            })
            .collect();
        ConstraintSet::new(seqs, Vocabulary::new(vocab)).unwrap()
    }

    fn random_reachable_prefix(rng: &mut ChaCha12Rng, s: &ConstraintSet) -> TokenSeq {
        let members: Vec<&TokenSeq> = s.iter().collect();
        let m = members[rng.gen_range(0..members.len())];
        m.prefix(rng.gen_range(0..m.len()))
    }

    #[test]
    fn ppv_matches_trie_on_fuzzed_queries() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for _ in 0..400 {
            let vocab = rng.gen_range(2..32);
            let s = random_set(&mut rng, vocab);
            let trie = Trie::build(&s);
            for policy in [BucketPolicy::PowerOfTwo, BucketPolicy::Single] {
                let idx = SortedIndex::build(&s, policy).unwrap();
                for _ in 0..4 {
                    let prefix = if rng.gen_bool(0.7) {
                        random_reachable_prefix(&mut rng, &s)
                    } else {
                        let len = rng.gen_range(0..s.max_len());
                        TokenSeq::from_ids(
                            &(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>(),
                        )
                    };
                    let m = rng.gen_range(1..=vocab as usize);
                    let mut cands: Vec<TokenId> = (0..vocab).map(TokenId).collect();
                    for i in (1..cands.len()).rev() {
                        cands.swap(i, rng.gen_range(0..=i));
                    }
                    cands.truncate(m);
                    let a = ppv_verify(&idx, &prefix, &cands).unwrap();
                    let b = trie.verify(&prefix, &cands).unwrap();
                    assert_eq!(a, b, "prefix {prefix} cands {cands:?}");
                }
            }
        }
    }

    #[test]
    fn truncated_and_full_row_searches_find_the_same_row() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        for _ in 0..300 {
            let vocab = rng.gen_range(2..16);
            let s = random_set(&mut rng, vocab);
            let idx = SortedIndex::build(&s, BucketPolicy::Single).unwrap();
            let b = &idx.buckets()[0];
            let w = rng.gen_range(1..=b.width());
            let query: Vec<u32> = (0..w).map(|_| rng.gen_range(0..vocab)).collect();
            let (trunc, _) = lower_bound_truncated(b, &query);
            let full = lower_bound_full_row(b, &query);
            assert_eq!(trunc, full, "query {query:?}");
        }
    }

    #[test]
    fn monotone_restriction() {
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        for _ in 0..200 {
            let vocab = rng.gen_range(2..24);
            let s = random_set(&mut rng, vocab);
            let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
            let prefix = random_reachable_prefix(&mut rng, &s);
            let mut all: Vec<TokenId> = (0..vocab).map(TokenId).collect();
            for i in (1..all.len()).rev() {
                all.swap(i, rng.gen_range(0..=i));
            }
            let small = &all[..rng.gen_range(1..=all.len())];
            let large_mask = ppv_verify(&idx, &prefix, &all).unwrap();
            let small_mask = ppv_verify(&idx, &prefix, small).unwrap();
            assert_eq!(small_mask, large_mask.restricted_to(small));
        }
    }

    #[test]
    fn never_dead_end_from_reachable_prefixes() {
        let mut rng = ChaCha12Rng::seed_from_u64(36);
        for _ in 0..100 {
            let vocab = rng.gen_range(2..16);
            let s = random_set(&mut rng, vocab);
            let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
            let mut stack = vec![TokenSeq::empty()];
            while let Some(p) = stack.pop() {
                let mask = full_valid_set(&idx, &p).unwrap();
                assert!(
                    mask.count_allowed() > 0 || mask.eok_allowed(),
                    "dead end at {p}"
                );
                for t in mask.allowed_tokens() {
                    let child = p.extended(t);
                    if child.len() < idx.max_keyword_len() {
                        stack.push(child);
                    }
                }
            }
        }
    }

    #[test]
    fn search_cost_stays_within_the_binary_search_bound() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        for _ in 0..50 {
            let vocab = rng.gen_range(2..16);
            let s = random_set(&mut rng, vocab);
            let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
            let prefix = random_reachable_prefix(&mut rng, &s);
            let cands: Vec<TokenId> = (0..vocab).map(TokenId).collect();
            let (_, stats) = ppv_verify_with_stats(&idx, &prefix, &cands).unwrap();
            assert!(stats.row_comparisons <= cands.len() as u64 * comparison_bound(&idx));
        }
    }

    #[test]
    fn trie_json_round_trip_preserves_verification() {
        let mut rng = ChaCha12Rng::seed_from_u64(38);
        for _ in 0..50 {
            let vocab = rng.gen_range(2..16);
            let s = random_set(&mut rng, vocab);
            let trie = Trie::build(&s);
            let json = trie.to_json_string().unwrap();
            let back = Trie::from_json_str(&json).unwrap();
            assert_eq!(back.vocab_size(), trie.vocab_size());
            assert_eq!(back.max_keyword_len(), trie.max_keyword_len());
            for _ in 0..5 {
                let prefix = random_reachable_prefix(&mut rng, &s);
                let cands: Vec<TokenId> = (0..vocab).map(TokenId).collect();
                assert_eq!(
                    trie.verify(&prefix, &cands).unwrap(),
                    back.verify(&prefix, &cands).unwrap()
                );
            }
            for m in s.iter() {
                assert!(back.is_member(m));
            }
        }
    }

    #[test]
    fn concurrent_readers_agree() {
        let s = random_set(&mut ChaCha12Rng::seed_from_u64(39), 12);
        let idx = SortedIndex::build(&s, BucketPolicy::PowerOfTwo).unwrap();
        let cands: Vec<TokenId> = (0..12).map(TokenId).collect();
        let expect = ppv_verify(&idx, &TokenSeq::empty(), &cands).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..4 {
                scope.spawn(|| {
                    for _ in 0..100 {
                        let got = ppv_verify(&idx, &TokenSeq::empty(), &cands).unwrap();
                        assert_eq!(got, expect);
                    }
                });
            }
        });
    }
}
