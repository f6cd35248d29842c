//! Benchmarks: per-query verification latency, index vs trie load time,
//! and sampling-quality sweeps.
//!
//! Timing numbers are machine-dependent and are reported, never
//! hard-asserted; mask equivalence between the two backends is asserted
//! inline on every benchmarked query, so a report is only ever produced
//! from a run that also verified correctness.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::{BucketPolicy, ConstraintSet, SortedIndex};
use crate::model::{TabularModel, TerminationMode};
use crate::oracle::{exact_target, OracleError};
use crate::sampler::{disc_sample, DiscConfig, RoundLimit};
use crate::types::{TokenId, TokenSeq, Vocabulary};
use crate::verifier::{comparison_bound, ppv_verify_with_stats, Trie};

/// Vocabulary used for synthetic keyword sets; sized like a real
/// subword vocabulary.
pub const SYNTHETIC_VOCAB: u32 = 50_264;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Ppv,
    Trie,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Ppv => write!(f, "ppv"),
            Backend::Trie => write!(f, "trie"),
        }
    }
}

/// One benchmark scenario result. Timing columns (`median_ns`, `p95_ns`,
/// `load_ms`) vary run to run; everything else is seed-deterministic.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: String,
    pub backend: Backend,
    pub set_size: usize,
    pub top_m: usize,
    pub queries: usize,
    pub median_ns: u64,
    pub p95_ns: u64,
    pub load_ms: f64,
    pub comparisons_mean: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str =
    "scenario,backend,set_size,M,queries,median_ns,p95_ns,load_ms,comparisons_mean,seed";

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{}",
            self.scenario,
            self.backend,
            self.set_size,
            self.top_m,
            self.queries,
            self.median_ns,
            self.p95_ns,
            self.load_ms,
            self.comparisons_mean,
            self.seed
        )
    }
}

pub fn write_reports_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Synthetic keyword set: geometric lengths (mean 8, capped at 24) with
/// uniform tokens over the synthetic vocabulary. Draws until `size`
/// distinct keywords exist, so short-keyword collisions do not shrink
/// the set.
pub fn synthetic_constraint_set(size: usize, seed: u64) -> ConstraintSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut seqs: HashSet<TokenSeq> = HashSet::with_capacity(size);
    let mut attempts = 0usize;
    while seqs.len() < size && attempts < size.saturating_mul(4) + 1000 {
        attempts += 1;
        let mut len = 1usize;
        while len < 24 && rng.gen::<f64>() >= 0.125 {
            len += 1;
        }
        seqs.insert(TokenSeq::from_ids(
            &(0..len)
                .map(|_| rng.gen_range(0..SYNTHETIC_VOCAB))
                .collect::<Vec<_>>(),
        ));
    }
    ConstraintSet::new(seqs, Vocabulary::new(SYNTHETIC_VOCAB))
        .expect("synthetic keywords are always in range")
}

struct Query {
    prefix: TokenSeq,
    candidates: Vec<TokenId>,
}

/// Random reachable prefixes, each with `m` distinct candidates of which
/// at least one is a true continuation.
fn make_queries(
    set: &ConstraintSet,
    count: usize,
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Query> {
    let members: Vec<&TokenSeq> = set.iter().collect();
    let vocab = set.vocab().size();
    (0..count)
        .map(|_| {
            let member = members[rng.gen_range(0..members.len())];
            let cut = rng.gen_range(0..member.len());
            let prefix = member.prefix(cut);
            let continuation = member.get(cut).unwrap();
            let mut seen: HashSet<u32> = HashSet::with_capacity(m);
            seen.insert(continuation.0);
            let mut candidates = vec![continuation];
            while candidates.len() < m.min(vocab as usize) {
                let t = rng.gen_range(0..vocab);
                if seen.insert(t) {
                    candidates.push(TokenId(t));
                }
            }
            Query { prefix, candidates }
        })
        .collect()
}

fn percentile_ns(samples: &mut [u64], fraction: f64) -> u64 {
    samples.sort_unstable();
    let i = ((samples.len() as f64 - 1.0) * fraction).round() as usize;
    samples[i]
}

/// Per-query verification latency for both backends over a sweep of set
/// sizes and candidate counts. Masks are checked for equivalence on
/// every query before anything is timed.
pub fn bench_verify(
    sizes: &[usize],
    top_ms: &[usize],
    queries: usize,
    seed: u64,
) -> Vec<BenchReport> {
    let mut reports = Vec::new();
    for (si, &size) in sizes.iter().enumerate() {
        let set = synthetic_constraint_set(size, seed.wrapping_add(si as u64));
        let idx = SortedIndex::build(&set, BucketPolicy::PowerOfTwo).unwrap();
        let trie = Trie::build(&set);
        let bound = comparison_bound(&idx);
        for &m in top_ms {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (size as u64) ^ (m as u64) << 32);
            let qs = make_queries(&set, queries, m, &mut rng);

            // correctness pass: both backends agree on every query
            for q in &qs {
                let a = crate::verifier::ppv_verify(&idx, &q.prefix, &q.candidates).unwrap();
                let b = trie.verify(&q.prefix, &q.candidates).unwrap();
                assert_eq!(a, b, "backend mismatch at prefix {}", q.prefix);
            }

            // timed passes
            let mut ppv_ns = Vec::with_capacity(qs.len());
            let mut comparisons = 0u64;
            for q in &qs {
                let start = Instant::now();
                let (mask, stats) =
                    ppv_verify_with_stats(&idx, &q.prefix, &q.candidates).unwrap();
                ppv_ns.push(start.elapsed().as_nanos() as u64);
                assert!(stats.row_comparisons <= q.candidates.len() as u64 * bound);
                comparisons += stats.row_comparisons;
                std::hint::black_box(mask);
            }
            let mut trie_ns = Vec::with_capacity(qs.len());
            for q in &qs {
                let start = Instant::now();
                let mask = trie.verify(&q.prefix, &q.candidates).unwrap();
                trie_ns.push(start.elapsed().as_nanos() as u64);
                std::hint::black_box(mask);
            }

            reports.push(BenchReport {
                scenario: "verify".into(),
                backend: Backend::Ppv,
                set_size: set.len(),
                top_m: m,
                queries: qs.len(),
                median_ns: percentile_ns(&mut ppv_ns, 0.5),
                p95_ns: percentile_ns(&mut ppv_ns, 0.95),
                load_ms: 0.0,
                comparisons_mean: comparisons as f64 / qs.len() as f64,
                seed,
            });
            reports.push(BenchReport {
                scenario: "verify".into(),
                backend: Backend::Trie,
                set_size: set.len(),
                top_m: m,
                queries: qs.len(),
                median_ns: percentile_ns(&mut trie_ns, 0.5),
                p95_ns: percentile_ns(&mut trie_ns, 0.95),
                load_ms: 0.0,
                comparisons_mean: 0.0,
                seed,
            });
        }
    }
    reports
}

/// Load-time comparison: the binary index versus the JSON trie, written
/// and re-read from temporary files over identical keyword sets.
pub fn bench_load(sizes: &[usize], seed: u64) -> Vec<BenchReport> {
    let mut reports = Vec::new();
    let dir = std::env::temp_dir().join(format!(
        "cdk-bench-load-{}-{seed}",
        std::process::id()
    ));
    std::fs::create_dir_all(&dir).expect("create bench temp dir");
    for (si, &size) in sizes.iter().enumerate() {
        let set = synthetic_constraint_set(size, seed.wrapping_add(si as u64));
        let idx = SortedIndex::build(&set, BucketPolicy::PowerOfTwo).unwrap();
        let trie = Trie::build(&set);

        let idx_path: PathBuf = dir.join(format!("s{size}.cdk"));
        let trie_path: PathBuf = dir.join(format!("s{size}.trie.json"));
        idx.save(&idx_path).unwrap();
        let file = std::fs::File::create(&trie_path).unwrap();
        trie.write_json(std::io::BufWriter::new(file)).unwrap();

        let reps = if size >= 100_000 { 1 } else { 3 };
        let mut idx_ms = f64::INFINITY;
        let mut loaded_idx = None;
        for _ in 0..reps {
            let start = Instant::now();
            let loaded = SortedIndex::load(&idx_path).unwrap();
            idx_ms = idx_ms.min(start.elapsed().as_secs_f64() * 1e3);
            loaded_idx = Some(loaded);
        }
        let mut trie_ms = f64::INFINITY;
        let mut loaded_trie = None;
        for _ in 0..reps {
            let start = Instant::now();
            let file = std::fs::File::open(&trie_path).unwrap();
            let loaded = Trie::read_json(std::io::BufReader::new(file)).unwrap();
            trie_ms = trie_ms.min(start.elapsed().as_secs_f64() * 1e3);
            loaded_trie = Some(loaded);
        }

        // the reloaded structures must still agree
        let loaded_idx = loaded_idx.unwrap();
        let loaded_trie = loaded_trie.unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xb0a7);
        for q in make_queries(&set, 50, 32, &mut rng) {
            let a = crate::verifier::ppv_verify(&loaded_idx, &q.prefix, &q.candidates).unwrap();
            let b = loaded_trie.verify(&q.prefix, &q.candidates).unwrap();
            assert_eq!(a, b);
        }

        for (backend, load_ms) in [(Backend::Ppv, idx_ms), (Backend::Trie, trie_ms)] {
            reports.push(BenchReport {
                scenario: "load".into(),
                backend,
                set_size: set.len(),
                top_m: 0,
                queries: 0,
                median_ns: 0,
                p95_ns: 0,
                load_ms,
                comparisons_mean: 0.0,
                seed,
            });
        }
        std::fs::remove_file(&idx_path).ok();
        std::fs::remove_file(&trie_path).ok();
    }
    std::fs::remove_dir_all(&dir).ok();
    reports
}

/// One row of the sampling-quality sweep.
#[derive(Debug, Clone)]
pub struct QualityRow {
    pub rounds: u32,
    pub top_m: usize,
    pub tv_distance: f64,
    pub mean_rounds: f64,
}

pub const QUALITY_CSV_HEADER: &str = "K,M,tv_distance,mean_rounds";

pub fn write_quality_csv(rows: &[QualityRow]) -> String {
    let mut out = String::from(QUALITY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.4}",
            r.rounds, r.top_m, r.tv_distance, r.mean_rounds
        );
    }
    out
}

/// Empirical total-variation distance to the exact target and mean draw
/// count, per (K, M) grid point.
pub fn quality_sweep(
    model: &TabularModel,
    set: &ConstraintSet,
    rounds: &[u32],
    top_ms: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<QualityRow>, OracleError> {
    let mode = TerminationMode::default_for(set);
    let target = exact_target(model, set, mode)?;
    let idx = SortedIndex::build(set, BucketPolicy::PowerOfTwo)
        .map_err(|e| OracleError::Domain(e.to_string()))?;
    let mut rows = Vec::new();
    for &k in rounds {
        for &m in top_ms {
            let cfg = DiscConfig {
                rounds: RoundLimit::Finite(k),
                top_m: m.min(idx.vocab_size() as usize),
                seed,
                ..DiscConfig::new(&idx, mode)
            };
            let mut counts: BTreeMap<TokenSeq, u64> = BTreeMap::new();
            let mut total_draws = 0usize;
            for draw in 0..draws {
                let mut rng = cfg.rng_for_draw(draw as u64);
                let out = disc_sample(model, &idx, &cfg, &mut rng)
                    .map_err(|e| OracleError::Domain(e.to_string()))?;
                total_draws += out.total_draws();
                *counts.entry(out.sequence).or_insert(0) += 1;
            }
            rows.push(QualityRow {
                rounds: k,
                top_m: m,
                tv_distance: target.tv_from_counts(&counts, draws as u64),
                mean_rounds: total_draws as f64 / draws as f64,
            });
        }
    }
    Ok(rows)
}
