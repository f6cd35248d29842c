//! Constrained candidate sampling with importance-weighted acceptance.
//!
//! A candidate is grown token by token from the masked, renormalized
//! model distribution, accumulating the importance score `x`: the
//! product over steps of the valid probability mass. Each candidate is
//! accepted with probability `x`; after `K` rejections, `K` fresh
//! candidates are drawn and one is resampled with probability
//! proportional to its score. All probability accumulation is done in
//! log space so long keywords with small masses cannot underflow.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use thiserror::Error;

use crate::corpus::SortedIndex;
use crate::dist::{normalize_masked, TokenDistribution};
use crate::mask::Mask;
use crate::model::{splitmix64, LanguageModel, ModelError, TerminationMode};
use crate::types::{TokenId, TokenSeq};
use crate::verifier::{is_member, ppv_verify, VerifyError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("bad sampler configuration: {0}")]
    Config(String),
    #[error("dead end at prefix [{prefix}]: every valid token fell outside the top-{top_m} candidates")]
    DeadEnd { prefix: String, top_m: usize },
    #[error("candidate exceeded the length guard {guard} (verifier bug)")]
    MaxLenExceeded { guard: usize },
    #[error("fallback resampling weights degenerated to zero")]
    FallbackDegenerate,
    #[error("sequence [{0}] is not a member of the constraint set")]
    NotMember(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Maximum acceptance rounds before falling back to importance
/// resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundLimit {
    Finite(u32),
    /// Loop until acceptance; the expected number of rounds stays finite.
    Infinite,
}

#[derive(Debug, Clone)]
pub struct DiscConfig {
    pub rounds: RoundLimit,
    /// How many top-probability tokens are verified per step.
    pub top_m: usize,
    pub temperature: f64,
    pub termination: TerminationMode,
    /// Trip wire for runaway candidates; never fires with a correct
    /// verifier.
    pub max_len_guard: usize,
    pub seed: u64,
}

impl DiscConfig {
    /// Defaults: K=4, M=50 (clamped to the vocabulary), T=1.
    pub fn new(idx: &SortedIndex, termination: TerminationMode) -> DiscConfig {
        DiscConfig {
            rounds: RoundLimit::Finite(4),
            top_m: 50.min(idx.vocab_size() as usize),
            temperature: 1.0,
            termination,
            max_len_guard: idx.max_keyword_len(),
            seed: 0,
        }
    }

    /// Oracle-comparison configuration: every token verified (M = |V|).
    pub fn exact(idx: &SortedIndex, termination: TerminationMode) -> DiscConfig {
        DiscConfig {
            top_m: idx.vocab_size() as usize,
            ..DiscConfig::new(idx, termination)
        }
    }

    pub fn with_rounds(mut self, rounds: RoundLimit) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate_for(&self, idx: &SortedIndex) -> Result<(), SamplerError> {
        if let RoundLimit::Finite(k) = self.rounds {
            if k == 0 {
                return Err(SamplerError::Config("K must be at least 1".into()));
            }
        }
        if self.top_m == 0 || self.top_m > idx.vocab_size() as usize {
            return Err(SamplerError::Config(format!(
                "M must lie in [1, {}], got {}",
                idx.vocab_size(),
                self.top_m
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(SamplerError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.termination == TerminationMode::PrefixFree && !idx.prefix_free() {
            return Err(SamplerError::Config(
                "prefix-free termination requires a prefix-free constraint set".into(),
            ));
        }
        if self.max_len_guard < idx.max_keyword_len() {
            return Err(SamplerError::Config(format!(
                "length guard {} below the longest keyword {}",
                self.max_len_guard,
                idx.max_keyword_len()
            )));
        }
        Ok(())
    }

    /// RNG for the whole run.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed)
    }

    /// Independent per-draw RNG; draws can run in any order (or in
    /// parallel) and still reproduce byte-identically.
    pub fn rng_for_draw(&self, draw: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(draw)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptedBy {
    /// A candidate passed the probabilistic acceptance test.
    Accept,
    /// All rounds rejected; the result came from importance resampling.
    FallbackResample,
}

impl std::fmt::Display for AcceptedBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AcceptedBy::Accept => write!(f, "accept"),
            AcceptedBy::FallbackResample => write!(f, "fallback_resample"),
        }
    }
}

/// A completed draw: the sequence, its importance score (stored as a
/// log), the number of acceptance-phase rounds consumed, and the full
/// per-candidate trace (acceptance phase first, then any fallback
/// draws), so `trace.len()` is the total number of candidate draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sequence: TokenSeq,
    pub log_importance: f64,
    pub rounds_used: u32,
    pub accepted_by: AcceptedBy,
    pub trace: Vec<(TokenSeq, f64)>,
}

impl SampleOutcome {
    pub fn importance(&self) -> f64 {
        self.log_importance.exp()
    }

    /// Candidate draws across both phases.
    pub fn total_draws(&self) -> usize {
        self.trace.len()
    }
}

/// Grows one constrained candidate, returning it with the log of its
/// importance score.
pub fn sample_candidate<M: LanguageModel + ?Sized>(
    model: &M,
    idx: &SortedIndex,
    cfg: &DiscConfig,
    rng: &mut impl Rng,
) -> Result<(TokenSeq, f64), SamplerError> {
    let mut seq = TokenSeq::empty();
    let mut log_x = 0.0f64;
    loop {
        if cfg.termination == TerminationMode::PrefixFree && is_member(idx, &seq) {
            break;
        }
        if seq.len() > cfg.max_len_guard {
            return Err(SamplerError::MaxLenExceeded {
                guard: cfg.max_len_guard,
            });
        }
        if seq.len() == model.max_len() {
            // Forced termination: the end-of-keyword factor here is 1, so
            // the step contributes no importance mass. Masking guarantees
            // the sequence is already a member.
            assert!(is_member(idx, &seq), "non-member at model max length");
            break;
        }
        let dist = model.next_distribution(&seq, cfg.temperature)?;
        let mask = step_mask(idx, &seq, &dist, cfg)?;
        let (masked, mass) = normalize_masked(&dist, &mask).map_err(|_| SamplerError::DeadEnd {
            prefix: seq.to_string(),
            top_m: cfg.top_m,
        })?;
        log_x += mass.ln();
        match draw_coordinate(&masked, rng) {
            Coordinate::Token(t) => seq.push(t),
            Coordinate::Eok => {
                assert!(is_member(idx, &seq), "end-of-keyword drawn off the set");
                break;
            }
        }
    }
    Ok((seq, log_x))
}

/// Valid continuations of `seq` among the top-M tokens, plus the
/// end-of-keyword coordinate where the mode and membership allow it.
fn step_mask(
    idx: &SortedIndex,
    seq: &TokenSeq,
    dist: &TokenDistribution,
    cfg: &DiscConfig,
) -> Result<Mask, SamplerError> {
    let mut mask = if seq.len() < idx.max_keyword_len() {
        let top = dist.top_m(cfg.top_m);
        ppv_verify(idx, seq, &top)?
    } else {
        // At the longest keyword length nothing can extend; only the
        // end-of-keyword step remains.
        let mut m = Mask::none(idx.vocab_size());
        m.set_eok(is_member(idx, seq));
        m
    };
    if cfg.termination == TerminationMode::PrefixFree {
        mask.set_eok(false);
    }
    Ok(mask)
}

enum Coordinate {
    Token(TokenId),
    Eok,
}

/// Inverse-CDF draw over the masked distribution: tokens in ascending id
/// order, the end-of-keyword coordinate last.
fn draw_coordinate(d: &TokenDistribution, rng: &mut impl Rng) -> Coordinate {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in d.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last_positive = Some(TokenId(i as u32));
        if u < cum {
            return Coordinate::Token(TokenId(i as u32));
        }
    }
    if d.eok_prob() > 0.0 {
        return Coordinate::Eok;
    }
    // unreachable up to float rounding; fall back to the largest id seen
    Coordinate::Token(last_positive.expect("masked distribution had no positive coordinate"))
}

/// The full decoder: accept-with-probability-x over at most `K` rounds,
/// then importance resampling among `K` fresh candidates.
pub fn disc_sample<M: LanguageModel + ?Sized>(
    model: &M,
    idx: &SortedIndex,
    cfg: &DiscConfig,
    rng: &mut impl Rng,
) -> Result<SampleOutcome, SamplerError> {
    cfg.validate_for(idx)?;
    let mut trace: Vec<(TokenSeq, f64)> = Vec::new();
    let limit = match cfg.rounds {
        RoundLimit::Finite(k) => Some(k),
        RoundLimit::Infinite => None,
    };
    let mut round = 0u32;
    loop {
        if let Some(k) = limit {
            if round >= k {
                break;
            }
        }
        round += 1;
        let (seq, log_x) = sample_candidate(model, idx, cfg, rng)?;
        assert!(is_member(idx, &seq), "sampled candidate left the set");
        trace.push((seq.clone(), log_x));
        let eps: f64 = rng.gen();
        if log_x.exp() > eps {
            return Ok(SampleOutcome {
                sequence: seq,
                log_importance: log_x,
                rounds_used: round,
                accepted_by: AcceptedBy::Accept,
                trace,
            });
        }
    }

    // All K rounds rejected: K fresh draws, resample proportional to score.
    let k = limit.expect("fallback only reachable with finite rounds");
    let mut fresh = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let (seq, log_x) = sample_candidate(model, idx, cfg, rng)?;
        assert!(is_member(idx, &seq), "sampled candidate left the set");
        trace.push((seq.clone(), log_x));
        fresh.push((seq, log_x));
    }
    let max_log = fresh
        .iter()
        .map(|(_, lx)| *lx)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_log.is_finite() {
        return Err(SamplerError::FallbackDegenerate);
    }
    let weights: Vec<f64> = fresh.iter().map(|(_, lx)| (lx - max_log).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = fresh.len() - 1;
    for (j, w) in weights.iter().enumerate() {
        if pick < *w {
            chosen = j;
            break;
        }
        pick -= w;
    }
    let (sequence, log_importance) = fresh.swap_remove(chosen);
    Ok(SampleOutcome {
        sequence,
        log_importance,
        rounds_used: k,
        accepted_by: AcceptedBy::FallbackResample,
        trace,
    })
}

/// The biased baseline: one constrained pass, candidate returned
/// unconditionally.
pub fn cd_sample<M: LanguageModel + ?Sized>(
    model: &M,
    idx: &SortedIndex,
    cfg: &DiscConfig,
    rng: &mut impl Rng,
) -> Result<TokenSeq, SamplerError> {
    cfg.validate_for(idx)?;
    let (seq, _) = sample_candidate(model, idx, cfg, rng)?;
    assert!(is_member(idx, &seq), "sampled candidate left the set");
    Ok(seq)
}

/// Deterministic recomputation of the log importance score along `seq`'s
/// decoding path under the same M/T/termination settings as sampling.
/// Bit-identical to the value a sampling run producing `seq` records.
pub fn log_importance_score<M: LanguageModel + ?Sized>(
    model: &M,
    idx: &SortedIndex,
    seq: &TokenSeq,
    cfg: &DiscConfig,
) -> Result<f64, SamplerError> {
    if !is_member(idx, seq) {
        return Err(SamplerError::NotMember(seq.to_string()));
    }
    let steps = match cfg.termination {
        TerminationMode::PrefixFree => seq.len(),
        TerminationMode::Eok => seq.len() + 1,
    };
    let mut log_x = 0.0f64;
    for t in 0..steps {
        let prefix = seq.prefix(t.min(seq.len()));
        if prefix.len() == model.max_len() {
            break; // forced end-of-keyword contributes mass 1
        }
        let dist = model.next_distribution(&prefix, cfg.temperature)?;
        let mask = step_mask(idx, &prefix, &dist, cfg)?;
        let (_, mass) = normalize_masked(&dist, &mask).map_err(|_| SamplerError::DeadEnd {
            prefix: prefix.to_string(),
            top_m: cfg.top_m,
        })?;
        log_x += mass.ln();
    }
    Ok(log_x)
}

/// Linear-space importance score in (0, 1].
pub fn importance_score<M: LanguageModel + ?Sized>(
    model: &M,
    idx: &SortedIndex,
    seq: &TokenSeq,
    cfg: &DiscConfig,
) -> Result<f64, SamplerError> {
    log_importance_score(model, idx, seq, cfg).map(f64::exp)
}
