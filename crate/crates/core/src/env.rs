//! Synthetic verifiable prompts.
//!
//! A prompt accepts a fixed set of response sequences. Its difficulty is the
//! accepted fraction of the response space, which is exactly the solve
//! probability of the uniform policy.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{enumerable_size, PolicyParams, PromptId, ResponseSeq};

const UNIVERSE_FORMAT: &str = "bapo-universe";
const UNIVERSE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: PromptId,
    /// Sorted and deduplicated.
    accepted: Vec<ResponseSeq>,
    difficulty: f64,
}

impl PromptSpec {
    pub fn new(
        id: PromptId,
        mut accepted: Vec<ResponseSeq>,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let space = enumerable_size(vocab_size, max_len)?;
        for y in &accepted {
            y.validate(vocab_size, max_len)?;
        }
        accepted.sort();
        accepted.dedup();
        if accepted.is_empty() {
            return Err(Error::Config(format!("prompt {id} accepts no response")));
        }
        let difficulty = accepted.len() as f64 / space as f64;
        Ok(Self {
            id,
            accepted,
            difficulty,
        })
    }

    pub fn accepted(&self) -> &[ResponseSeq] {
        &self.accepted
    }

    /// Solve probability of the uniform policy, `|accepted| / V^L`.
    pub fn difficulty(&self) -> f64 {
        self.difficulty
    }

    /// Binary verifier: 1 iff `y` is accepted.
    pub fn verify(&self, y: &ResponseSeq) -> u8 {
        u8::from(self.accepted.binary_search(y).is_ok())
    }

    /// Exact `mu_{pi,r}(x) = sum_{y in accepted} pi(y|x)`.
    pub fn exact_expected_reward(&self, params: &PolicyParams) -> Result<f64> {
        let mut total = 0.0;
        for y in &self.accepted {
            total += params.log_prob(self.id, y)?.exp();
        }
        Ok(total.clamp(0.0, 1.0))
    }
}

/// One entry of the requested difficulty histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyBucket {
    pub difficulty: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub difficulty_histogram: Vec<DifficultyBucket>,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            num_prompts: 256,
            vocab_size: 4,
            max_len: 3,
            difficulty_histogram: vec![
                DifficultyBucket {
                    difficulty: 1.0 / 64.0,
                    fraction: 0.4,
                },
                DifficultyBucket {
                    difficulty: 4.0 / 64.0,
                    fraction: 0.2,
                },
                DifficultyBucket {
                    difficulty: 16.0 / 64.0,
                    fraction: 0.2,
                },
                DifficultyBucket {
                    difficulty: 32.0 / 64.0,
                    fraction: 0.2,
                },
            ],
            seed: 2024,
        }
    }
}

impl UniverseConfig {
    /// Generates the universe from the configured seed.
    pub fn build(&self) -> Result<PromptUniverse> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        generate_universe(self, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptUniverse {
    pub vocab_size: usize,
    pub max_len: usize,
    prompts: Vec<PromptSpec>,
    weights: Vec<f64>,
    /// Notes about requested difficulties that had to be rounded.
    pub provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct UniverseFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    universe: PromptUniverse,
}

impl PromptUniverse {
    pub fn new(
        vocab_size: usize,
        max_len: usize,
        prompts: Vec<PromptSpec>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = prompts.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let u = Self {
            vocab_size,
            max_len,
            prompts,
            weights,
            provenance: Vec::new(),
        };
        u.validate()?;
        Ok(u)
    }

    fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("universe has no prompts".into()));
        }
        if self.weights.len() != self.prompts.len() {
            return Err(Error::Config("one sampling weight per prompt required".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "sampling weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.id != PromptId(i) {
                return Err(Error::Config(format!(
                    "prompt ids must be 0..n in order; found {} at {i}",
                    p.id
                )));
            }
            for y in &p.accepted {
                y.validate(self.vocab_size, self.max_len)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prompt(&self, id: PromptId) -> Result<&PromptSpec> {
        self.prompts.get(id.0).ok_or(Error::UnknownPrompt {
            id,
            count: self.prompts.len(),
        })
    }

    /// Uniform policy over this universe's shape.
    pub fn initial_policy(&self) -> PolicyParams {
        PolicyParams::uniform(self.prompts.len(), self.vocab_size, self.max_len)
    }

    /// Draws up to `count` distinct prompts from the sampling weights,
    /// skipping any in `exclude`.
    pub fn sample_prompts<R: Rng + ?Sized>(
        &self,
        count: usize,
        exclude: &HashSet<PromptId>,
        rng: &mut R,
    ) -> Vec<PromptId> {
        let candidates: Vec<usize> = (0..self.prompts.len())
            .filter(|i| !exclude.contains(&PromptId(*i)) && self.weights[*i] > 0.0)
            .collect();
        let amount = count.min(candidates.len());
        if amount == 0 {
            return Vec::new();
        }
        let first = self.weights[candidates[0]];
        let uniform = candidates.iter().all(|&i| self.weights[i] == first);
        let picked: Vec<usize> = if uniform {
            index::sample(rng, candidates.len(), amount).into_vec()
        } else {
            index::sample_weighted(rng, candidates.len(), |j| self.weights[candidates[j]], amount)
                .expect("weights validated")
                .into_vec()
        };
        picked.into_iter().map(|j| PromptId(candidates[j])).collect()
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        let file = UniverseFile {
            format: UNIVERSE_FORMAT.into(),
            version: UNIVERSE_VERSION,
            universe: self.clone(),
        };
        serde_json::to_writer(writer, &file)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: UniverseFile = serde_json::from_reader(reader)?;
        if file.format != UNIVERSE_FORMAT || file.version != UNIVERSE_VERSION {
            return Err(Error::Config(format!(
                "unsupported universe file {} v{}",
                file.format, file.version
            )));
        }
        let u = file.universe;
        u.validate()?;
        // Recompute difficulty labels rather than trusting the file.
        let prompts = u
            .prompts
            .into_iter()
            .map(|p| PromptSpec::new(p.id, p.accepted, u.vocab_size, u.max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prompts, ..u })
    }
}

/// Splits `n` items across fractions with the largest-remainder rule, so each
/// count is within one of `fraction * n`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Builds a universe whose difficulty histogram matches `config`.
pub fn generate_universe<R: Rng + ?Sized>(
    config: &UniverseConfig,
    rng: &mut R,
) -> Result<PromptUniverse> {
    if config.num_prompts == 0 {
        return Err(Error::Config("num_prompts must be positive".into()));
    }
    if config.difficulty_histogram.is_empty() {
        return Err(Error::Config("difficulty histogram is empty".into()));
    }
    let space = enumerable_size(config.vocab_size, config.max_len)?;
    if config.vocab_size == 0 || config.max_len == 0 {
        return Err(Error::Config("vocab_size and max_len must be positive".into()));
    }
    let fractions: Vec<f64> = config
        .difficulty_histogram
        .iter()
        .map(|b| b.fraction)
        .collect();
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "histogram fractions must be non-negative and sum to 1 (sum = {total})"
        )));
    }

    let mut provenance = Vec::new();
    let mut sizes = Vec::with_capacity(fractions.len());
    for b in &config.difficulty_histogram {
        if !(0.0..=1.0).contains(&b.difficulty) {
            return Err(Error::Config(format!(
                "difficulty {} outside [0, 1]",
                b.difficulty
            )));
        }
        let k = ((b.difficulty * space as f64).round() as u64).clamp(1, space);
        let achieved = k as f64 / space as f64;
        if (achieved - b.difficulty).abs() > 1e-12 {
            provenance.push(format!(
                "requested difficulty {} is not a multiple of 1/{space}; using {k}/{space} = {achieved}",
                b.difficulty
            ));
        }
        sizes.push(k);
    }

    let counts = apportion(config.num_prompts, &fractions);
    let mut assignment: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(bucket, &c)| std::iter::repeat_n(bucket, c))
        .collect();
    assignment.shuffle(rng);

    let prompts = assignment
        .iter()
        .enumerate()
        .map(|(i, &bucket)| {
            let accepted = index::sample(rng, space as usize, sizes[bucket] as usize)
                .into_iter()
                .map(|idx| ResponseSeq::from_index(idx as u64, config.vocab_size, config.max_len))
                .collect();
            PromptSpec::new(PromptId(i), accepted, config.vocab_size, config.max_len)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut universe = PromptUniverse::new(config.vocab_size, config.max_len, prompts, None)?;
    universe.provenance = provenance;
    Ok(universe)
}
