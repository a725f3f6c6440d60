//! Group-relative reward statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::PromptSpec;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PromptId, ResponseSeq};

/// Default smoothing added to the group variance before standardizing.
pub const DEFAULT_EPS_SMOOTH: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation, unsmoothed.
    pub std: f64,
    /// `k (G - k) / G^2`, exact to one rounding.
    pub variance: f64,
    pub advantages: Vec<f64>,
}

impl GroupStats {
    pub fn variance(&self) -> f64 {
        self.variance
    }
}

/// Mean, standard deviation and standardized advantages
/// `(r_i - mu) / sqrt(sigma^2 + eps)` for one group of binary rewards.
pub fn compute_group_stats(rewards: &[u8], eps_smooth: f64) -> Result<GroupStats> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    if rewards.iter().any(|&r| r > 1) {
        return Err(Error::InvalidResponse("rewards must be 0 or 1".into()));
    }
    let successes = rewards.iter().filter(|&&r| r == 1).count();
    let mean = successes as f64 / g as f64;
    // Binary rewards: sigma^2 = mu (1 - mu), computed from integer counts.
    let variance = (successes * (g - successes)) as f64 / (g * g) as f64;
    let scale = (variance + eps_smooth).sqrt();
    let advantages = if successes == 0 || successes == g {
        vec![0.0; g]
    } else {
        rewards
            .iter()
            .map(|&r| (f64::from(r) - mean) / scale)
            .collect()
    };
    Ok(GroupStats {
        mean,
        std: variance.sqrt(),
        variance,
        advantages,
    })
}

/// Accuracy bin `k` for a group mean `mu = k / G`.
pub fn accuracy_bin(mean: f64, group_size: usize) -> Result<usize> {
    let scaled = mean * group_size as f64;
    let k = scaled.round();
    if !(0.0..=group_size as f64).contains(&k) || (scaled - k).abs() > 1e-9 {
        return Err(Error::NotGridMean { mean, group_size });
    }
    Ok(k as usize)
}

/// `G` responses for one prompt with verified rewards and the behavior
/// policy's per-token log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseGroup {
    pub prompt: PromptId,
    pub responses: Vec<ResponseSeq>,
    pub rewards: Vec<u8>,
    pub behavior_token_log_probs: Vec<Vec<f64>>,
    /// `step_tag` of the generating policy.
    pub behavior_step: u64,
    pub stats: GroupStats,
}

impl ResponseGroup {
    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn mean(&self) -> f64 {
        self.stats.mean
    }

    pub fn successes(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1).count()
    }

    /// All rewards identical, so every advantage is zero.
    pub fn is_zero_variance(&self) -> bool {
        let s = self.successes();
        s == 0 || s == self.group_size()
    }

    /// Sequence-level behavior log-probabilities.
    pub fn behavior_log_probs(&self) -> Vec<f64> {
        self.behavior_token_log_probs
            .iter()
            .map(|lps| lps.iter().sum())
            .collect()
    }
}

/// Samples a group of `group_size` responses from `policy` and verifies them.
pub fn rollout_group<R: Rng + ?Sized>(
    policy: &PolicyParams,
    prompt: &PromptSpec,
    group_size: usize,
    eps_smooth: f64,
    rng: &mut R,
) -> Result<ResponseGroup> {
    let mut responses = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    let mut lps = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let y = policy.sample_response(prompt.id, rng)?;
        rewards.push(prompt.verify(&y));
        lps.push(policy.token_log_probs(prompt.id, &y)?);
        responses.push(y);
    }
    let stats = compute_group_stats(&rewards, eps_smooth)?;
    Ok(ResponseGroup {
        prompt: prompt.id,
        responses,
        rewards,
        behavior_token_log_probs: lps,
        behavior_step: policy.step_tag(),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_rewards() {
        let s = compute_group_stats(&[0; 8], 1e-4).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!(s.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn two_of_eight() {
        let s = compute_group_stats(&[1, 1, 0, 0, 0, 0, 0, 0], 1e-4).unwrap();
        assert_eq!(s.mean, 0.25);
        assert!((s.variance() - 0.1875).abs() < 1e-15);
        let scale = 0.1876f64.sqrt();
        assert!((s.advantages[0] - 0.75 / scale).abs() < 1e-12);
        assert!((s.advantages[0] - 1.731_57).abs() < 5e-5);
        assert!((s.advantages[7] + 0.25 / scale).abs() < 1e-12);
        assert!((s.advantages[7] + 0.577_19).abs() < 5e-5);
    }

    #[test]
    fn boundary_variance() {
        let s = compute_group_stats(&[1, 0, 0, 0, 0, 0, 0, 0], 1e-4).unwrap();
        assert_eq!(s.mean, 0.125);
        assert_eq!(s.variance(), 7.0 / 64.0);
        assert_eq!(s.variance(), 0.109375);
    }

    #[test]
    fn group_too_small() {
        assert!(matches!(
            compute_group_stats(&[1], 1e-4),
            Err(Error::GroupTooSmall(1))
        ));
    }

    #[test]
    fn bins() {
        assert_eq!(accuracy_bin(0.0, 8).unwrap(), 0);
        assert_eq!(accuracy_bin(1.0, 8).unwrap(), 8);
        assert_eq!(accuracy_bin(0.375, 8).unwrap(), 3);
        assert!(accuracy_bin(0.3, 8).is_err());
        assert!(accuracy_bin(1.125, 8).is_err());
    }

    proptest! {
        #[test]
        fn standardization_invariants(rewards in prop::collection::vec(0u8..=1, 2..32)) {
            let g = rewards.len();
            let s = compute_group_stats(&rewards, 1e-4).unwrap();
            let k = rewards.iter().filter(|&&r| r == 1).count();
            prop_assert_eq!(s.mean, k as f64 / g as f64);
            prop_assert!((s.variance() - s.mean * (1.0 - s.mean)).abs() < 1e-15);
            let sum: f64 = s.advantages.iter().sum();
            prop_assert!(sum.abs() < 1e-9);
            if k > 0 && k < g {
                prop_assert!(s.variance() >= (g as f64 - 1.0) / (g * g) as f64 - 1e-15);
                // unit variance as the smoothing vanishes
                let t = compute_group_stats(&rewards, 1e-14).unwrap();
                let var = t.advantages.iter().map(|a| a * a).sum::<f64>() / g as f64;
                prop_assert!((var - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(s.advantages.iter().all(|&a| a == 0.0));
            }
        }
    }
}
