//! Exact enumeration oracles.
//!
//! Everything here is computed by exhaustive recursion over the
//! constraint set with a tabular model, independently of the sampler and
//! the sorted-index search paths, so it can serve as ground truth for
//! both. Budgets are hard: beyond them the oracles error rather than
//! approximate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::ConstraintSet;
use crate::model::{LanguageModel, ModelError, TabularModel, TerminationMode};
use crate::types::{TokenId, TokenSeq};

/// Largest set the enumeration oracles accept.
pub const SET_BUDGET: usize = 64;
/// Largest number of resampling tuples `|S|^(K-1)` the mixture oracle
/// will enumerate.
pub const TUPLE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("support mismatch: first distribution escapes the second's support")]
    SupportMismatch,
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A finite distribution over members of the constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    probs: BTreeMap<TokenSeq, f64>,
}

impl ExactDistribution {
    pub fn from_map(probs: BTreeMap<TokenSeq, f64>) -> Result<Self, OracleError> {
        let mut total = 0.0;
        for (seq, &p) in &probs {
            if !(p.is_finite() && p >= 0.0) {
                return Err(OracleError::Degenerate(format!(
                    "probability {p} for [{seq}]"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(OracleError::Degenerate(format!(
                "total mass {total} deviates from 1"
            )));
        }
        Ok(ExactDistribution { probs })
    }

    pub fn prob(&self, seq: &TokenSeq) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entries in lexicographic key order.
    pub fn iter(&self) -> impl Iterator<Item = (&TokenSeq, f64)> {
        self.probs.iter().map(|(s, &p)| (s, p))
    }

    /// Pointwise mixture `t * self + (1 - t) * other`.
    pub fn mix(&self, other: &ExactDistribution, t: f64) -> ExactDistribution {
        let mut out = BTreeMap::new();
        for (seq, &p) in &self.probs {
            *out.entry(seq.clone()).or_insert(0.0) += t * p;
        }
        for (seq, &q) in &other.probs {
            *out.entry(seq.clone()).or_insert(0.0) += (1.0 - t) * q;
        }
        ExactDistribution { probs: out }
    }

    /// Total-variation distance to another distribution.
    pub fn tv_distance(&self, other: &ExactDistribution) -> f64 {
        let mut keys: Vec<&TokenSeq> = self.probs.keys().collect();
        keys.extend(other.probs.keys());
        keys.sort();
        keys.dedup();
        0.5 * keys
            .into_iter()
            .map(|k| (self.prob(k) - other.prob(k)).abs())
            .sum::<f64>()
    }

    /// Total-variation distance to an empirical histogram.
    pub fn tv_from_counts(&self, counts: &BTreeMap<TokenSeq, u64>, total: u64) -> f64 {
        let mut keys: Vec<&TokenSeq> = self.probs.keys().collect();
        keys.extend(counts.keys());
        keys.sort();
        keys.dedup();
        0.5 * keys
            .into_iter()
            .map(|k| {
                let emp = counts.get(k).copied().unwrap_or(0) as f64 / total as f64;
                (emp - self.prob(k)).abs()
            })
            .sum::<f64>()
    }

    /// Text export: `<tokens><TAB><probability>` with 17 significant
    /// digits, keys in lexicographic order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (seq, p) in self.iter() {
            let _ = writeln!(out, "{seq}\t{p:.16e}");
        }
        out
    }
}

/// Per-member quantities from one exhaustive recursion: the model
/// probability of emitting the member, its importance score (the
/// product of valid-mass factors along its path), and its probability
/// under the masked, renormalized decoding process.
struct MemberQuantities {
    seqs: Vec<TokenSeq>,
    model_prob: Vec<f64>,
    importance: Vec<f64>,
    masked_prob: Vec<f64>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn enumerate_members(
    model: &TabularModel,
    set: &ConstraintSet,
    mode: TerminationMode,
) -> Result<MemberQuantities, OracleError> {
    if set.is_empty() {
        return Err(OracleError::Domain("empty constraint set".into()));
    }
    if set.len() > SET_BUDGET {
        return Err(OracleError::Budget(format!(
            "set has {} members, budget is {SET_BUDGET}",
            set.len()
        )));
    }
    if set.max_len() > model.max_len() {
        return Err(OracleError::Domain(format!(
            "set max length {} exceeds model max length {}",
            set.max_len(),
            model.max_len()
        )));
    }
    if mode == TerminationMode::PrefixFree && !set.is_prefix_free() {
        return Err(OracleError::Domain(
            "prefix-free mode on a set with nested members".into(),
        ));
    }
    let members: Vec<&TokenSeq> = set.iter().collect();
    let mut out = MemberQuantities {
        seqs: Vec::with_capacity(members.len()),
        model_prob: Vec::with_capacity(members.len()),
        importance: Vec::with_capacity(members.len()),
        masked_prob: Vec::with_capacity(members.len()),
    };
    recurse(
        model,
        &members,
        mode,
        0,
        members.len(),
        0,
        1.0,
        1.0,
        1.0,
        &mut out,
    )?;
    Ok(out)
}

/// Walks the member trie: `members[lo..hi]` all share a prefix of
/// `depth` tokens. Accumulators carry the unconstrained product, the
/// importance product, and the masked-process product.
#[allow(clippy::too_many_arguments)]
fn recurse(
    model: &TabularModel,
    members: &[&TokenSeq],
    mode: TerminationMode,
    lo: usize,
    hi: usize,
    depth: usize,
    acc_p: f64,
    acc_x: f64,
    acc_cd: f64,
    out: &mut MemberQuantities,
) -> Result<(), OracleError> {
    let is_member = members[lo].len() == depth;
    // contiguous child ranges by token at `depth` (sorted input)
    let mut children: Vec<(TokenId, usize, usize)> = Vec::new();
    let mut i = if is_member { lo + 1 } else { lo };
    while i < hi {
        let tok = members[i].get(depth).expect("sorted range shares the prefix");
        let start = i;
        while i < hi && members[i].get(depth) == Some(tok) {
            i += 1;
        }
        children.push((tok, start, i));
    }

    if mode == TerminationMode::PrefixFree {
        if is_member {
            debug_assert!(children.is_empty(), "prefix-free set has nested members");
            out.seqs.push(members[lo].clone());
            out.model_prob.push(acc_p);
            out.importance.push(acc_x);
            out.masked_prob.push(acc_cd);
            return Ok(());
        }
        let dist = model.next_distribution(&members[lo].prefix(depth), 1.0)?;
        let mass: f64 = children.iter().map(|&(t, _, _)| dist.prob(t)).sum();
        for &(tok, clo, chi) in &children {
            let p = dist.prob(tok);
            recurse(
                model,
                members,
                mode,
                clo,
                chi,
                depth + 1,
                acc_p * p,
                acc_x * mass,
                acc_cd * safe_div(p, mass),
                out,
            )?;
        }
        return Ok(());
    }

    // end-of-keyword mode
    let (dist, eok) = if depth == model.max_len() {
        debug_assert!(is_member && children.is_empty());
        (None, 1.0)
    } else {
        let d = model.next_distribution(&members[lo].prefix(depth), 1.0)?;
        let e = d.eok_prob();
        (Some(d), e)
    };
    let child_mass: f64 = children
        .iter()
        .map(|&(t, _, _)| dist.as_ref().map(|d| d.prob(t)).unwrap_or(0.0))
        .sum();
    let mass = child_mass + if is_member { eok } else { 0.0 };
    if is_member {
        out.seqs.push(members[lo].clone());
        out.model_prob.push(acc_p * eok);
        out.importance.push(acc_x * mass);
        out.masked_prob.push(acc_cd * safe_div(eok, mass));
    }
    for &(tok, clo, chi) in &children {
        let p = dist.as_ref().expect("children imply a queryable prefix").prob(tok);
        recurse(
            model,
            members,
            mode,
            clo,
            chi,
            depth + 1,
            acc_p * p,
            acc_x * mass,
            acc_cd * safe_div(p, mass),
            out,
        )?;
    }
    Ok(())
}

/// Probability mass the unconstrained model assigns outside the set.
pub fn p_bad(
    model: &TabularModel,
    set: &ConstraintSet,
    mode: TerminationMode,
) -> Result<f64, OracleError> {
    let q = enumerate_members(model, set, mode)?;
    Ok((1.0 - q.model_prob.iter().sum::<f64>()).max(0.0))
}

/// The target distribution: the model conditioned on landing in the set.
pub fn exact_target(
    model: &TabularModel,
    set: &ConstraintSet,
    mode: TerminationMode,
) -> Result<ExactDistribution, OracleError> {
    let q = enumerate_members(model, set, mode)?;
    let total: f64 = q.model_prob.iter().sum();
    if total <= 0.0 {
        return Err(OracleError::Degenerate(
            "the model assigns zero mass to the set".into(),
        ));
    }
    ExactDistribution::from_map(
        q.seqs
            .into_iter()
            .zip(q.model_prob.iter().map(|p| p / total))
            .collect(),
    )
}

/// The biased distribution of naive per-step masking: at each prefix the
/// model distribution is renormalized over valid continuations (plus the
/// end-of-keyword coordinate where allowed) and multiplied down the path.
pub fn exact_cd(
    model: &TabularModel,
    set: &ConstraintSet,
    mode: TerminationMode,
) -> Result<ExactDistribution, OracleError> {
    let q = enumerate_members(model, set, mode)?;
    ExactDistribution::from_map(q.seqs.into_iter().zip(q.masked_prob).collect())
}

/// The distribution induced by the full decoder with `k` rounds:
/// `p_b^k * Q + (1 - p_b^k) * P_target`, where `Q` is the
/// importance-resampling distribution over `k` fresh draws, enumerated
/// over all `|S|^(k-1)` companion tuples.
pub fn exact_disc(
    model: &TabularModel,
    set: &ConstraintSet,
    mode: TerminationMode,
    k: u32,
) -> Result<ExactDistribution, OracleError> {
    if k == 0 {
        return Err(OracleError::Domain("k must be at least 1".into()));
    }
    let q = enumerate_members(model, set, mode)?;
    let n = q.seqs.len();
    let tuples = (n as u64).checked_pow(k - 1).unwrap_or(u64::MAX);
    if tuples > TUPLE_BUDGET {
        return Err(OracleError::Budget(format!(
            "{n}^{} = {tuples} resampling tuples, budget is {TUPLE_BUDGET}",
            k - 1
        )));
    }
    let total_p: f64 = q.model_prob.iter().sum();
    if total_p <= 0.0 {
        return Err(OracleError::Degenerate(
            "the model assigns zero mass to the set".into(),
        ));
    }
    let p_b = (1.0 - total_p).max(0.0);
    // single-draw distribution P_hat(a) = P_L(a) / x(a)
    let p_hat: Vec<f64> = q
        .model_prob
        .iter()
        .zip(&q.importance)
        .map(|(&p, &x)| safe_div(p, x))
        .collect();
    let hat_total: f64 = p_hat.iter().sum();
    assert!(
        (hat_total - 1.0).abs() < 1e-9,
        "single-draw masses must sum to 1, got {hat_total}"
    );

    // winning probability W(a): over all (k-1)-tuples of companions,
    // the chance that `a` in the first slot survives the score-weighted
    // resampling. Fixed odometer order keeps the float sum reproducible.
    let mut w = vec![0.0f64; n];
    let mut digits = vec![0usize; (k - 1) as usize];
    loop {
        let companion_weight: f64 = digits.iter().map(|&j| p_hat[j]).product();
        if companion_weight > 0.0 {
            let companion_score: f64 = digits.iter().map(|&j| q.importance[j]).sum();
            for (win, &score) in w.iter_mut().zip(&q.importance) {
                *win += companion_weight * safe_div(score, score + companion_score);
            }
        }
        // advance the odometer
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                break;
            }
            digits[pos] += 1;
            if digits[pos] < n {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
        if pos == digits.len() {
            break;
        }
    }

    let weight = p_b.powi(k as i32);
    let mut probs = BTreeMap::new();
    for a in 0..n {
        let resample = k as f64 * p_hat[a] * w[a];
        let target = q.model_prob[a] / total_p;
        probs.insert(q.seqs[a].clone(), weight * resample + (1.0 - weight) * target);
    }
    ExactDistribution::from_map(probs)
}

/// Natural-log KL divergence. Returns +inf when the first distribution
/// puts mass where the second has none; `0 ln(0/q)` counts as 0.
pub fn kl(p: &ExactDistribution, q: &ExactDistribution) -> f64 {
    let mut total = 0.0;
    for (seq, pp) in p.iter() {
        if pp == 0.0 {
            continue;
        }
        let qq = q.prob(seq);
        if qq == 0.0 {
            return f64::INFINITY;
        }
        total += pp * (pp / qq).ln();
    }
    total
}

/// Both sides of the mixture contraction: KL(P || tP + (1-t)Q) on the
/// left and (1-t) KL(P || Q) on the right; the left never exceeds the
/// right.
pub fn kl_mixture_gap(
    p: &ExactDistribution,
    q: &ExactDistribution,
    t: f64,
) -> Result<(f64, f64), OracleError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(OracleError::Domain(format!("t must lie in [0,1], got {t}")));
    }
    for (seq, pp) in p.iter() {
        if pp > 0.0 && q.prob(seq) == 0.0 {
            return Err(OracleError::SupportMismatch);
        }
    }
    let mixture = p.mix(q, t);
    Ok((kl(p, &mixture), (1.0 - t) * kl(p, q)))
}

/// Explicit-constant KL bound for the `k`-round decoder:
/// `p_b^k * (sqrt(p_b / (k (1-p_b))) + p_b / (2 k (1-p_b)))`.
pub fn disc_kl_bound(p_b: f64, k: u32) -> Result<f64, OracleError> {
    if !(0.0..1.0).contains(&p_b) {
        return Err(OracleError::Domain(format!(
            "p_b must lie in [0,1), got {p_b}"
        )));
    }
    if k == 0 {
        return Err(OracleError::Domain("k must be at least 1".into()));
    }
    let kf = k as f64;
    let resample_kl = (p_b / (kf * (1.0 - p_b))).sqrt() + p_b / (2.0 * kf * (1.0 - p_b));
    Ok(p_b.powi(k as i32) * resample_kl)
}

/// Expected number of candidate draws: `(1 - p_b^k)/(1 - p_b) + k p_b^k`
/// (acceptance rounds plus the fresh fallback draws).
pub fn expected_rounds(p_b: f64, k: u32) -> Result<f64, OracleError> {
    if !(0.0..1.0).contains(&p_b) {
        return Err(OracleError::Domain(format!(
            "p_b must lie in [0,1), got {p_b}"
        )));
    }
    if k == 0 {
        return Err(OracleError::Domain("k must be at least 1".into()));
    }
    let pk = p_b.powi(k as i32);
    Ok((1.0 - pk) / (1.0 - p_b) + k as f64 * pk)
}

/// The stated ceiling on the expected draw count, `(1 + e)/(1 - p_b)`.
pub fn expected_rounds_ceiling(p_b: f64) -> Result<f64, OracleError> {
    if !(0.0..1.0).contains(&p_b) {
        return Err(OracleError::Domain(format!(
            "p_b must lie in [0,1), got {p_b}"
        )));
    }
    Ok((1.0 + std::f64::consts::E) / (1.0 - p_b))
}

/// Closed-form KL between the target and the masked distribution for the
/// two-token worst case: with `d = 1 - p_b + p_b eps` and
/// `kappa = (1 - p_b)/d`, the divergence is
/// `kappa ln(kappa/(1-p_b)) + (p_b eps / d) ln(eps / d)`.
pub fn worst_case_kl(p_b: f64, eps: f64) -> Result<f64, OracleError> {
    if !(p_b > 0.0 && p_b < 1.0) || !(eps > 0.0 && eps < 1.0) {
        return Err(OracleError::Domain(format!(
            "p_b and eps must lie in (0,1), got ({p_b}, {eps})"
        )));
    }
    let d = 1.0 - p_b + p_b * eps;
    let kappa = (1.0 - p_b) / d;
    Ok(kappa * (kappa / (1.0 - p_b)).ln() + (p_b * eps / d) * (eps / d).ln())
}
