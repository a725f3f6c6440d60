//! Training-batch assembly from three sources:
//!
//! * `X1` fresh groups from the rollout policy that pass the online filter,
//! * `X2` previously difficult prompts that improved when re-rolled under the
//!   current policy,
//! * `X3` recent high-quality groups replayed to fill the remaining capacity.
//!
//! Thresholds `c2`, `c3` move linearly with the running mean reward.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{
    admit_bad, admit_high, capacity_defaults, drain_for_reeval, eligible_high, BufferEntry,
    BufferKind, FifoBuffer, DEFAULT_MAX_REEVAL_PROMPTS, DEFAULT_RECENCY_WINDOW,
};
use crate::env::PromptUniverse;
use crate::error::{Error, Result};
use crate::group::{rollout_group, ResponseGroup, DEFAULT_EPS_SMOOTH};
use crate::policy::{PolicyParams, PromptId};

pub const GAUSSIAN_CENTER: f64 = 0.5;
pub const GAUSSIAN_STD: f64 = 0.2;
pub const UNIFORM_KEEP: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep groups with `1/G <= mu <= (G-1)/G`.
    #[default]
    Range,
    /// Keep with probability `exp(-(mu - 0.5)^2 / (2 * 0.2^2))`, then drop
    /// zero-variance groups.
    Gaussian,
    /// Keep 60% of groups at random.
    Uniform,
}

/// Probability that the online filter keeps a group of mean `mu` before the
/// zero-variance cut.
pub fn fresh_acceptance(mean: f64, mode: FilterMode) -> f64 {
    match mode {
        FilterMode::Range => 1.0,
        FilterMode::Gaussian => {
            let d = mean - GAUSSIAN_CENTER;
            (-(d * d) / (2.0 * GAUSSIAN_STD * GAUSSIAN_STD)).exp()
        }
        FilterMode::Uniform => UNIFORM_KEEP,
    }
}

/// Online filter producing `X1`.
pub fn filter_fresh<R: Rng + ?Sized>(
    groups: Vec<ResponseGroup>,
    mode: FilterMode,
    rng: &mut R,
) -> Vec<ResponseGroup> {
    match mode {
        FilterMode::Range => groups.into_iter().filter(|g| !g.is_zero_variance()).collect(),
        FilterMode::Gaussian => groups
            .into_iter()
            .filter(|g| rng.gen::<f64>() < fresh_acceptance(g.mean(), mode))
            .filter(|g| !g.is_zero_variance())
            .collect(),
        FilterMode::Uniform => groups
            .into_iter()
            .filter(|_| rng.gen::<f64>() < UNIFORM_KEEP)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub c1: f64,
    pub c2_range: (f64, f64),
    pub c3_range: (f64, f64),
    pub c2: f64,
    pub c3: f64,
    pub r_tot: f64,
}

impl Thresholds {
    /// Thresholds at `r_tot = 0`.
    pub fn new(c1: f64, c2_range: (f64, f64), c3_range: (f64, f64)) -> Result<Self> {
        let th = Self {
            c1,
            c2_range,
            c3_range,
            c2: c2_range.0,
            c3: c3_range.0,
            r_tot: 0.0,
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let (c2l, c2h) = self.c2_range;
        let (c3l, c3h) = self.c3_range;
        if !(0.0..1.0).contains(&self.c1) || ![c2l, c2h, c3l, c3h].into_iter().all(unit) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if c2h < c2l || c3h < c3l {
            return Err(Error::Config("threshold range has high < low".into()));
        }
        if c2l > c3l || c2h > c3h {
            return Err(Error::Config("c2 range must not exceed c3 range".into()));
        }
        if self.c1 > c2l {
            return Err(Error::Config(format!(
                "c1 = {} must not exceed the lower end of the c2 range ({c2l})",
                self.c1
            )));
        }
        Ok(())
    }

    /// Variance floor of re-evaluated groups, `c1 (1 - c1)`.
    pub fn reeval_floor(&self) -> f64 {
        self.c1 * (1.0 - self.c1)
    }

    /// Variance floor of replayed groups, `min(c2 (1-c2), c3 (1-c3))`.
    pub fn replay_floor(&self) -> f64 {
        band_floor((self.c2, self.c3))
    }
}

pub(crate) fn band_floor((lo, hi): (f64, f64)) -> f64 {
    (lo * (1.0 - lo)).min(hi * (1.0 - hi))
}

/// `c_i = r_tot (c_i_high - c_i_low) + c_i_low` for `i in {2, 3}`; `c1` is
/// left unchanged.
pub fn adapt_thresholds(th: &Thresholds, r_tot: f64) -> Result<Thresholds> {
    th.validate()?;
    if !(0.0..=1.0).contains(&r_tot) {
        return Err(Error::Config(format!("r_tot = {r_tot} outside [0, 1]")));
    }
    let map = |(lo, hi): (f64, f64)| r_tot * (hi - lo) + lo;
    Ok(Thresholds {
        c2: map(th.c2_range),
        c3: map(th.c3_range),
        r_tot,
        ..th.clone()
    })
}

/// Running global mean reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTracker {
    half_life: Option<f64>,
    sum: f64,
    count: u64,
    value: f64,
}

impl RewardTracker {
    /// Cumulative mean of all fresh group means, or an EMA over per-step
    /// means when a half-life (in steps) is given.
    pub fn new(half_life: Option<f64>) -> Self {
        Self {
            half_life,
            sum: 0.0,
            count: 0,
            value: 0.0,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn observe(&mut self, group_means: &[f64]) {
        if group_means.is_empty() {
            return;
        }
        match self.half_life {
            None => {
                self.sum += group_means.iter().sum::<f64>();
                self.count += group_means.len() as u64;
                self.value = self.sum / self.count as f64;
            }
            Some(h) => {
                let step_mean = group_means.iter().sum::<f64>() / group_means.len() as f64;
                if self.count == 0 {
                    self.value = step_mean;
                } else {
                    let alpha = 1.0 - 0.5f64.powf(1.0 / h);
                    self.value += alpha * (step_mean - self.value);
                }
                self.count += 1;
            }
        }
        self.value = self.value.clamp(0.0, 1.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Fresh,
    Reevaluated,
    Replayed,
}

impl Subset {
    pub fn label(self) -> &'static str {
        match self {
            Subset::Fresh => "x1",
            Subset::Reevaluated => "x2",
            Subset::Replayed => "x3",
        }
    }
}

/// A group inside a training batch with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchGroup {
    pub subset: Subset,
    pub group: ResponseGroup,
    /// Group mean recorded when the source buffer entry was inserted.
    pub origin_mean: Option<f64>,
    /// Reward-variance floor this group is guaranteed to satisfy.
    pub floor: f64,
}

impl BatchGroup {
    pub fn fresh(group: ResponseGroup) -> Self {
        let g = group.group_size() as f64;
        Self {
            subset: Subset::Fresh,
            floor: (g - 1.0) / (g * g),
            group,
            origin_mean: None,
        }
    }

    /// Whether the group's reward variance meets its floor. Variances of
    /// binary groups are exact ratios of integers, so this is an exact test.
    pub fn meets_floor(&self) -> bool {
        self.group.stats.variance() >= self.floor
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub x1: usize,
    pub x2: usize,
    pub x3: usize,
}

impl Composition {
    pub fn total(&self) -> usize {
        self.x1 + self.x2 + self.x3
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub x1: Vec<BatchGroup>,
    pub x2: Vec<BatchGroup>,
    pub x3: Vec<BatchGroup>,
    pub size_cap: usize,
}

impl TrainingBatch {
    pub fn new(size_cap: usize) -> Self {
        Self {
            size_cap,
            ..Default::default()
        }
    }

    pub fn from_fresh(groups: Vec<ResponseGroup>, size_cap: usize) -> Self {
        Self {
            x1: groups.into_iter().map(BatchGroup::fresh).collect(),
            size_cap,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.x1.len() + self.x2.len() + self.x3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn groups(&self) -> impl Iterator<Item = &BatchGroup> {
        self.x1.iter().chain(&self.x2).chain(&self.x3)
    }

    pub fn composition(&self) -> Composition {
        Composition {
            x1: self.x1.len(),
            x2: self.x2.len(),
            x3: self.x3.len(),
        }
    }
}

/// Result of re-rolling difficult prompts under the current policy.
#[derive(Clone, Debug, Default)]
pub struct Reevaluation {
    pub admitted: Vec<BatchGroup>,
    /// Prompts to drop from the difficult buffer (admitted or mastered).
    pub remove: Vec<PromptId>,
    pub mastered: usize,
    pub groups_rolled: usize,
}

/// Re-rolls each entry under `policy`. Groups with `c1 < mu < 1` join `X2`
/// with `policy` as their behavior policy and leave the buffer; mastered
/// prompts (`mu = 1`) also leave; the rest stay.
pub fn reevaluate_bad<R: Rng + ?Sized>(
    entries: &[BufferEntry],
    policy: &PolicyParams,
    universe: &PromptUniverse,
    c1: f64,
    group_size: usize,
    eps_smooth: f64,
    rng: &mut R,
) -> Result<Reevaluation> {
    let mut out = Reevaluation::default();
    for entry in entries {
        let spec = universe.prompt(entry.prompt)?;
        let group = rollout_group(policy, spec, group_size, eps_smooth, rng)?;
        out.groups_rolled += 1;
        let mu = group.mean();
        if c1 < mu && mu < 1.0 {
            out.remove.push(entry.prompt);
            out.admitted.push(BatchGroup {
                subset: Subset::Reevaluated,
                group,
                origin_mean: Some(entry.mean_at_insert),
                floor: c1 * (1.0 - c1),
            });
        } else if mu >= 1.0 {
            out.remove.push(entry.prompt);
            out.mastered += 1;
        }
    }
    Ok(out)
}

/// Samples `min(|eligible|, max(0, B - n1 - n2))` replay groups without
/// replacement from recent high-quality entries not already in the batch.
#[allow(clippy::too_many_arguments)]
pub fn fill_high<R: Rng + ?Sized>(
    buffer: &mut FifoBuffer,
    batch_size: usize,
    n_fresh: usize,
    n_reevaluated: usize,
    current_step: u64,
    window: u64,
    exclude: &HashSet<PromptId>,
    rng: &mut R,
) -> Vec<BatchGroup> {
    let eligible: Vec<BufferEntry> = eligible_high(buffer, current_step, window)
        .into_iter()
        .filter(|e| !exclude.contains(&e.prompt))
        .collect();
    let room = batch_size.saturating_sub(n_fresh + n_reevaluated);
    let k = eligible.len().min(room);
    if k == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, eligible.len(), k).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let e = &eligible[i];
            BatchGroup {
                subset: Subset::Replayed,
                group: e.group.clone(),
                origin_mean: Some(e.mean_at_insert),
                floor: band_floor(e.band),
            }
        })
        .collect()
}

/// Trims a batch to `size_cap`, removing random groups from `X3`, then `X2`,
/// then `X1`.
pub fn trim_overflow<R: Rng + ?Sized>(batch: &mut TrainingBatch, rng: &mut R) {
    let mut excess = batch.len().saturating_sub(batch.size_cap);
    for tier in [&mut batch.x3, &mut batch.x2, &mut batch.x1] {
        if excess == 0 {
            break;
        }
        let drop = excess.min(tier.len());
        if drop == 0 {
            continue;
        }
        let mut keep = index::sample(rng, tier.len(), tier.len() - drop).into_vec();
        keep.sort_unstable();
        let old = std::mem::take(tier);
        *tier = keep.into_iter().map(|i| old[i].clone()).collect();
        excess -= drop;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub filter_mode: FilterMode,
    pub reeval_every: u64,
    pub max_reeval_prompts: usize,
    pub enable_reevaluation: bool,
    pub enable_replay: bool,
    pub recency_window: u64,
    pub eps_smooth: f64,
    pub c1: f64,
    pub c2_range: (f64, f64),
    pub c3_range: (f64, f64),
    pub capacity_bad: Option<usize>,
    pub capacity_high: Option<usize>,
    pub r_tot_half_life: Option<f64>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            group_size: 8,
            filter_mode: FilterMode::Range,
            reeval_every: 5,
            max_reeval_prompts: DEFAULT_MAX_REEVAL_PROMPTS,
            enable_reevaluation: true,
            enable_replay: true,
            recency_window: DEFAULT_RECENCY_WINDOW,
            eps_smooth: DEFAULT_EPS_SMOOTH,
            c1: 1.0 / 8.0,
            c2_range: (1.0 / 8.0, 4.0 / 8.0),
            c3_range: (2.0 / 8.0, 5.0 / 8.0),
            capacity_bad: None,
            capacity_high: None,
            r_tot_half_life: None,
        }
    }
}

/// Parameter-free variant: plain zero-variance filtering for `X1`, replay of
/// all-wrong groups for `X2`, and reuse of exactly-50%-accuracy groups for
/// `X3`.
pub fn mini_test_mode(config: BatchConfig) -> BatchConfig {
    BatchConfig {
        filter_mode: FilterMode::Range,
        c1: 0.0,
        c2_range: (0.5, 0.5),
        c3_range: (0.5, 0.5),
        ..config
    }
}

/// What happened while assembling one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub batch: TrainingBatch,
    pub fresh_zero_variance: usize,
    pub x1_zero_variance: usize,
    pub reevaluated_groups: usize,
    pub mastered: usize,
    /// Thresholds in force while this batch was assembled.
    pub thresholds_used: Thresholds,
    /// Thresholds after adapting to the updated running reward.
    pub thresholds_next: Thresholds,
    pub skip: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Admissions {
    pub bad: usize,
    pub high: usize,
}

/// Stateful assembler owning both replay buffers and the thresholds.
#[derive(Clone, Debug)]
pub struct BatchConstructor {
    config: BatchConfig,
    thresholds: Thresholds,
    bad: FifoBuffer,
    high: FifoBuffer,
    reward: RewardTracker,
}

impl BatchConstructor {
    pub fn new(config: BatchConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if config.group_size < 2 {
            return Err(Error::GroupTooSmall(config.group_size));
        }
        if config.reeval_every == 0 {
            return Err(Error::Config("reeval_every must be at least 1".into()));
        }
        if config.max_reeval_prompts == 0 {
            return Err(Error::Config("max_reeval_prompts must be at least 1".into()));
        }
        let thresholds = Thresholds::new(config.c1, config.c2_range, config.c3_range)?;
        let (cap_bad, cap_high) = capacity_defaults(config.batch_size);
        Ok(Self {
            bad: FifoBuffer::new(BufferKind::Bad, config.capacity_bad.unwrap_or(cap_bad))?,
            high: FifoBuffer::new(BufferKind::High, config.capacity_high.unwrap_or(cap_high))?,
            reward: RewardTracker::new(config.r_tot_half_life),
            thresholds,
            config,
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn bad_buffer(&self) -> &FifoBuffer {
        &self.bad
    }

    pub fn high_buffer(&self) -> &FifoBuffer {
        &self.high
    }

    /// Stores fresh groups in the replay buffers. A group admitted as
    /// difficult is not also stored as high quality.
    pub fn admit(&mut self, fresh: &[ResponseGroup], step: u64) -> Result<Admissions> {
        let mut adm = Admissions::default();
        let th = &self.thresholds;
        for g in fresh {
            if self.config.enable_reevaluation && admit_bad(&mut self.bad, g, th.c1, step) {
                adm.bad += 1;
                continue;
            }
            if self.config.enable_replay && admit_high(&mut self.high, g, th.c2, th.c3, step)? {
                adm.high += 1;
            }
        }
        Ok(adm)
    }

    /// Assembles `X1 ∪ X2 ∪ X3` for `step` and adapts the thresholds for the
    /// next step. `rng` drives selection; `reeval_rng` drives re-evaluation
    /// rollouts under `policy`.
    pub fn construct<R: Rng + ?Sized, Q: Rng + ?Sized>(
        &mut self,
        fresh: Vec<ResponseGroup>,
        step: u64,
        policy: &PolicyParams,
        universe: &PromptUniverse,
        rng: &mut R,
        reeval_rng: &mut Q,
    ) -> Result<BatchOutcome> {
        let cfg = &self.config;
        let fresh_means: Vec<f64> = fresh.iter().map(|g| g.mean()).collect();
        let fresh_zero_variance = fresh.iter().filter(|g| g.is_zero_variance()).count();

        let x1 = filter_fresh(fresh, cfg.filter_mode, rng);
        let x1_zero_variance = x1.iter().filter(|g| g.is_zero_variance()).count();
        let mut batch = TrainingBatch::from_fresh(x1, cfg.batch_size);
        let mut taken: HashSet<PromptId> = batch.x1.iter().map(|g| g.group.prompt).collect();

        let mut reevaluated_groups = 0;
        let mut mastered = 0;
        if cfg.enable_reevaluation && step > 0 && step.is_multiple_of(cfg.reeval_every) {
            let entries: Vec<BufferEntry> = drain_for_reeval(&self.bad, usize::MAX)
                .into_iter()
                .filter(|e| !taken.contains(&e.prompt))
                .take(cfg.max_reeval_prompts)
                .collect();
            let re = reevaluate_bad(
                &entries,
                policy,
                universe,
                self.thresholds.c1,
                cfg.group_size,
                cfg.eps_smooth,
                reeval_rng,
            )?;
            self.bad.remove_prompts(&re.remove);
            reevaluated_groups = re.groups_rolled;
            mastered = re.mastered;
            taken.extend(re.admitted.iter().map(|g| g.group.prompt));
            batch.x2 = re.admitted;
        }

        if cfg.enable_replay {
            batch.x3 = fill_high(
                &mut self.high,
                cfg.batch_size,
                batch.x1.len(),
                batch.x2.len(),
                step,
                cfg.recency_window,
                &taken,
                rng,
            );
        }
        trim_overflow(&mut batch, rng);

        let thresholds_used = self.thresholds.clone();
        self.reward.observe(&fresh_means);
        self.thresholds = adapt_thresholds(&self.thresholds, self.reward.value())?;

        Ok(BatchOutcome {
            skip: batch.is_empty(),
            batch,
            fresh_zero_variance,
            x1_zero_variance,
            reevaluated_groups,
            mastered,
            thresholds_used,
            thresholds_next: self.thresholds.clone(),
        })
    }
}
