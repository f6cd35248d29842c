//! Per-step token distributions and masked renormalization.

use thiserror::Error;

use crate::mask::Mask;
use crate::types::TokenId;

/// Tolerance on the total mass of an incoming distribution. Inputs may
/// come from external models with float32 noise.
pub const INPUT_MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("distribution mass {mass} deviates from 1 by more than {tolerance}")]
    BadMass { mass: f64, tolerance: f64 },
    #[error("negative or non-finite probability {value} at coordinate {coord}")]
    BadEntry { coord: String, value: f64 },
}

/// Renormalizing an all-zero masked slice signals a dead-end prefix,
/// which a correct verifier never produces.
#[derive(Debug, Error)]
#[error("masked probability mass is zero (dead-end prefix)")]
pub struct ZeroMassError;

/// A probability vector over the vocabulary plus a dedicated
/// end-of-keyword coordinate. The end-of-keyword step is not a
/// vocabulary token; keeping it separate keeps the keyword index free of
/// sentinel ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    eok_prob: f64,
}

impl TokenDistribution {
    /// Validates entries are non-negative and the total mass is within
    /// [`INPUT_MASS_TOLERANCE`] of 1.
    pub fn new(probs: Vec<f64>, eok_prob: f64) -> Result<Self, DistributionError> {
        for (i, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(DistributionError::BadEntry {
                    coord: i.to_string(),
                    value: p,
                });
            }
        }
        if !(eok_prob.is_finite() && eok_prob >= 0.0) {
            return Err(DistributionError::BadEntry {
                coord: "eok".to_string(),
                value: eok_prob,
            });
        }
        let mass: f64 = probs.iter().sum::<f64>() + eok_prob;
        if (mass - 1.0).abs() > INPUT_MASS_TOLERANCE {
            return Err(DistributionError::BadMass {
                mass,
                tolerance: INPUT_MASS_TOLERANCE,
            });
        }
        Ok(TokenDistribution { probs, eok_prob })
    }

    pub fn vocab_size(&self) -> u32 {
        self.probs.len() as u32
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.0 as usize]
    }

    pub fn eok_prob(&self) -> f64 {
        self.eok_prob
    }

    /// Ids of the `m` highest-probability tokens, ties broken by lower
    /// token id first. Deterministic across platforms.
    pub fn top_m(&self, m: usize) -> Vec<TokenId> {
        let mut ids: Vec<u32> = (0..self.probs.len() as u32).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .partial_cmp(&self.probs[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        ids.truncate(m);
        ids.into_iter().map(TokenId).collect()
    }
}

/// Restricts `d` to the masked coordinates and renormalizes. Returns the
/// restricted distribution together with the pre-normalization mass
/// `|P (.) mask|_1`, the per-step importance factor. The end-of-keyword
/// coordinate participates iff `mask.eok_allowed()`.
pub fn normalize_masked(
    d: &TokenDistribution,
    mask: &Mask,
) -> Result<(TokenDistribution, f64), ZeroMassError> {
    let mut mass = 0.0;
    for t in mask.allowed_tokens() {
        mass += d.prob(t);
    }
    if mask.eok_allowed() {
        mass += d.eok_prob;
    }
    if mass <= 0.0 {
        return Err(ZeroMassError);
    }
    let mut probs = vec![0.0; d.probs.len()];
    for t in mask.allowed_tokens() {
        probs[t.0 as usize] = d.prob(t) / mass;
    }
    let eok = if mask.eok_allowed() {
        d.eok_prob / mass
    } else {
        0.0
    };
    Ok((TokenDistribution { probs, eok_prob: eok }, mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn full_mask(n: u32) -> Mask {
        let mut m = Mask::none(n);
        for t in 0..n {
            m.allow(TokenId(t));
        }
        m
    }

    #[test]
    fn full_mask_is_identity() {
        let d = TokenDistribution::new(vec![0.6, 0.4], 0.0).unwrap();
        let (out, mass) = normalize_masked(&d, &full_mask(2)).unwrap();
        assert_eq!(out.probs(), &[0.6, 0.4]);
        assert_eq!(mass, 1.0);
    }

    #[test]
    fn single_branch_renormalizes_to_one() {
        // P(gloves|soccer)=0.1, P(shoes|soccer)=0.9; only gloves valid.
        let d = TokenDistribution::new(vec![0.1, 0.9], 0.0).unwrap();
        let mask = Mask::from_tokens(2, &[TokenId(0)]);
        let (out, mass) = normalize_masked(&d, &mask).unwrap();
        assert_eq!(out.prob(TokenId(0)), 1.0);
        assert_eq!(out.prob(TokenId(1)), 0.0);
        assert!((mass - 0.1).abs() < 1e-15);
    }

    #[test]
    fn half_mask_on_uniform() {
        let d = TokenDistribution::new(vec![0.25; 4], 0.0).unwrap();
        let mask = Mask::from_tokens(4, &[TokenId(1), TokenId(3)]);
        let (out, mass) = normalize_masked(&d, &mask).unwrap();
        assert_eq!(out.probs(), &[0.0, 0.5, 0.0, 0.5]);
        // cross-check against brute-force normalization
        let brute: f64 = [1, 3].iter().map(|&i| d.probs()[i as usize]).sum();
        assert_eq!(mass, brute);
        assert!((mass - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let d = TokenDistribution::new(vec![1.0, 0.0], 0.0).unwrap();
        let mask = Mask::from_tokens(2, &[TokenId(1)]);
        assert!(normalize_masked(&d, &mask).is_err());
    }

    #[test]
    fn eok_coordinate_participates_when_allowed() {
        let d = TokenDistribution::new(vec![0.3, 0.3], 0.4).unwrap();
        let mut mask = Mask::from_tokens(2, &[TokenId(0)]);
        mask.set_eok(true);
        let (out, mass) = normalize_masked(&d, &mask).unwrap();
        assert!((mass - 0.7).abs() < 1e-15);
        assert!((out.prob(TokenId(0)) - 0.3 / 0.7).abs() < 1e-15);
        assert!((out.eok_prob() - 0.4 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_mass_and_negative_entries() {
        assert!(TokenDistribution::new(vec![0.5, 0.4], 0.0).is_err());
        assert!(TokenDistribution::new(vec![1.2, -0.2], 0.0).is_err());
    }

    #[test]
    fn top_m_breaks_ties_by_lower_id() {
        let d = TokenDistribution::new(vec![0.2, 0.3, 0.2, 0.3], 0.0).unwrap();
        let top = d.top_m(3);
        assert_eq!(top, vec![TokenId(1), TokenId(3), TokenId(0)]);
    }

    #[test]
    fn normalized_output_sums_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..12u32);
            let mut w: Vec<f64> = (0..n + 1).map(|_| rng.gen_range(0.0..1.0f64)).collect();
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            let eok = w.pop().unwrap();
            let d = TokenDistribution::new(w, eok).unwrap();
            let mut mask = Mask::none(n);
            let mut any = false;
            for t in 0..n {
                if rng.gen_bool(0.5) {
                    mask.allow(TokenId(t));
                    any = true;
                }
            }
            mask.set_eok(rng.gen_bool(0.3));
            if !any && !mask.eok_allowed() {
                continue;
            }
            let Ok((out, mass)) = normalize_masked(&d, &mask) else {
                continue;
            };
            let sum: f64 = out.probs().iter().sum::<f64>() + out.eok_prob();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            let direct: f64 = mask.allowed_tokens().map(|t| d.prob(t)).sum::<f64>()
                + if mask.eok_allowed() { d.eok_prob() } else { 0.0 };
            assert_eq!(mass, direct);
        }
    }
}
