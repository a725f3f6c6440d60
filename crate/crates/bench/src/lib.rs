//! Fixtures for the engine benchmarks.

use bapo_core::group::rollout_group;
use bapo_core::{
    BatchConfig, BatchConstructor, PolicyParams, PromptUniverse, ResponseGroup, TrainingBatch,
    UniverseConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub universe: PromptUniverse,
    pub policy: PolicyParams,
    /// Slightly perturbed copy of `policy`, for divergence benchmarks.
    pub shifted: PolicyParams,
    pub fresh: Vec<ResponseGroup>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture() -> Fixture {
    let universe = UniverseConfig::default().build().expect("default universe");
    let policy = universe.initial_policy();
    let logits = policy
        .logits()
        .iter()
        .enumerate()
        .map(|(i, z)| z + 0.1 * ((i % 7) as f64 - 3.0))
        .collect();
    let shifted = PolicyParams::from_logits(
        policy.num_prompts(),
        policy.vocab_size(),
        policy.max_len(),
        logits,
        1,
    )
    .expect("shifted policy");
    let fresh = rollout(&universe, &policy, 64, &mut rng(1));
    Fixture {
        universe,
        policy,
        shifted,
        fresh,
    }
}

/// One group of 8 responses for each of the first `n` prompts.
pub fn rollout(universe: &PromptUniverse, policy: &PolicyParams, n: usize, rng: &mut ChaCha8Rng) -> Vec<ResponseGroup> {
    universe.prompts()[..n]
        .iter()
        .map(|p| rollout_group(policy, p, 8, 1e-4, rng).expect("rollout"))
        .collect()
}

/// A constructor primed with one step of admissions, and the batch it
/// assembles next.
pub fn primed_batch(f: &Fixture) -> (BatchConstructor, TrainingBatch) {
    let mut c = BatchConstructor::new(BatchConfig::default()).expect("constructor");
    c.admit(&f.fresh, 0).expect("admit");
    let out = c
        .construct(f.fresh.clone(), 1, &f.policy, &f.universe, &mut rng(2), &mut rng(3))
        .expect("construct");
    (c, out.batch)
}
