//! Training loop: delayed rollout-policy sync, rollout, buffer admission,
//! batch construction and one ascent step per batch, for BAPO and the
//! GRPO / delayed-GRPO / DAPO baselines.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{
    mini_test_mode, BatchConfig, BatchConstructor, BatchGroup, Composition, FilterMode, Subset,
    TrainingBatch,
};
use crate::buffer::{FifoBuffer, DEFAULT_MAX_REEVAL_PROMPTS, DEFAULT_RECENCY_WINDOW};
use crate::env::PromptUniverse;
use crate::error::{Error, Result};
use crate::group::{rollout_group, ResponseGroup, DEFAULT_EPS_SMOOTH};
use crate::metrics::bin_histogram;
use crate::objective::{
    objective, surrogate_gradient, ObjectiveConfig, ObjectiveTerms, RatioMode,
};
use crate::policy::{exact_tv, PolicyParams, PromptId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Bapo,
    BapoMini,
    Grpo,
    GrpoDelayed,
    Dapo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Bapo,
        Algorithm::BapoMini,
        Algorithm::Grpo,
        Algorithm::GrpoDelayed,
        Algorithm::Dapo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bapo => "bapo",
            Algorithm::BapoMini => "bapo_mini",
            Algorithm::Grpo => "grpo",
            Algorithm::GrpoDelayed => "grpo_delayed",
            Algorithm::Dapo => "dapo",
        }
    }

    fn uses_buffers(self) -> bool {
        matches!(self, Algorithm::Bapo | Algorithm::BapoMini)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm `{s}` (expected one of bapo, bapo_mini, grpo, grpo_delayed, dapo)"
                ))
            })
    }
}

/// Policy the KL penalty pulls toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// Initial parameters, never refreshed.
    Reference,
    /// The current rollout policy.
    Rollout,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub batch_size: usize,
    pub rollout_batch: usize,
    /// Steps between rollout-policy syncs; defaults to 5 for delayed
    /// algorithms and is fixed at 1 for grpo and dapo.
    pub rollout_delay: Option<u64>,
    pub reeval_every: u64,
    pub max_reeval_prompts: usize,
    pub kl_coef: f64,
    pub kl_target: Option<KlTarget>,
    pub clip_low: f64,
    /// Defaults to `clip_low`, or 0.28 for dapo.
    pub clip_high: Option<f64>,
    pub eps_smooth: f64,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub filter_mode: FilterMode,
    pub dapo_max_resample: usize,
    pub entropy_coef: f64,
    pub ratio_mode: RatioMode,
    pub clip_replayed: bool,
    pub c1: f64,
    pub c2_range: (f64, f64),
    pub c3_range: (f64, f64),
    pub capacity_bad: Option<usize>,
    pub capacity_high: Option<usize>,
    pub recency_window: u64,
    pub r_tot_half_life: Option<f64>,
    pub enable_reevaluation: Option<bool>,
    pub enable_replay: Option<bool>,
    pub minibatch_count: usize,
    pub eval_every: u64,
    pub track_subset: usize,
    pub tracking_seed: u64,
    /// Log exact TV to the rollout policy each step.
    pub monitor_tv: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Bapo,
            group_size: 8,
            batch_size: 64,
            rollout_batch: 64,
            rollout_delay: None,
            reeval_every: 5,
            max_reeval_prompts: DEFAULT_MAX_REEVAL_PROMPTS,
            kl_coef: 0.001,
            kl_target: None,
            clip_low: 0.2,
            clip_high: None,
            eps_smooth: DEFAULT_EPS_SMOOTH,
            learning_rate: 30.0,
            total_steps: 200,
            seed: 0,
            filter_mode: FilterMode::Range,
            dapo_max_resample: 4,
            entropy_coef: 0.001,
            ratio_mode: RatioMode::Token,
            clip_replayed: true,
            c1: 1.0 / 8.0,
            c2_range: (1.0 / 8.0, 4.0 / 8.0),
            c3_range: (2.0 / 8.0, 5.0 / 8.0),
            capacity_bad: None,
            capacity_high: None,
            recency_window: DEFAULT_RECENCY_WINDOW,
            r_tot_half_life: None,
            enable_reevaluation: None,
            enable_replay: None,
            minibatch_count: 1,
            eval_every: 10,
            track_subset: 100,
            tracking_seed: 7,
            monitor_tv: true,
        }
    }
}

/// Effective settings after applying algorithm defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub rollout_delay: u64,
    pub batch: BatchConfig,
    pub objective: ObjectiveConfig,
    pub kl_target: KlTarget,
    pub dynamic_sampling: bool,
}

impl TrainerConfig {
    pub fn plan(&self) -> Result<Plan> {
        let alg = self.algorithm;
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.batch_size == 0 || self.rollout_batch == 0 {
            return cfg_err("batch_size and rollout_batch must be positive".into());
        }
        if self.reeval_every == 0 {
            return cfg_err("reeval_every must be at least 1".into());
        }
        if self.dapo_max_resample == 0 {
            return cfg_err("dapo_max_resample must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return cfg_err(format!("learning_rate = {} invalid", self.learning_rate));
        }
        if !(self.eps_smooth > 0.0) {
            return cfg_err("eps_smooth must be positive".into());
        }
        if self.minibatch_count == 0 || self.minibatch_count > self.batch_size {
            return cfg_err("minibatch_count must lie in 1..=batch_size".into());
        }
        if self.eval_every == 0 {
            return cfg_err("eval_every must be at least 1".into());
        }
        if self.recency_window == 0 {
            return cfg_err("recency_window must be at least 1".into());
        }

        let on_policy = matches!(alg, Algorithm::Grpo | Algorithm::Dapo);
        let rollout_delay = match (on_policy, self.rollout_delay) {
            (true, Some(v)) if v != 1 => {
                return cfg_err(format!("{alg} is on-policy; rollout_delay must be 1, got {v}"))
            }
            (true, _) => 1,
            (false, Some(0)) => return cfg_err("rollout_delay must be at least 1".into()),
            (false, Some(v)) => v,
            (false, None) => 5,
        };
        if !alg.uses_buffers()
            && (self.enable_reevaluation == Some(true) || self.enable_replay == Some(true))
        {
            return cfg_err(format!("{alg} does not use replay buffers"));
        }

        let clip_high = self.clip_high.unwrap_or(if alg == Algorithm::Dapo {
            0.28
        } else {
            self.clip_low
        });
        for (name, e) in [("clip_low", self.clip_low), ("clip_high", clip_high)] {
            if !(e > 0.0 && e < 1.0) {
                return cfg_err(format!("{name} = {e} must lie in (0, 1)"));
            }
        }

        let mut batch = BatchConfig {
            batch_size: self.batch_size,
            group_size: self.group_size,
            filter_mode: self.filter_mode,
            reeval_every: self.reeval_every,
            max_reeval_prompts: self.max_reeval_prompts,
            enable_reevaluation: alg.uses_buffers() && self.enable_reevaluation.unwrap_or(true),
            enable_replay: alg.uses_buffers() && self.enable_replay.unwrap_or(true),
            recency_window: self.recency_window,
            eps_smooth: self.eps_smooth,
            c1: self.c1,
            c2_range: self.c2_range,
            c3_range: self.c3_range,
            capacity_bad: self.capacity_bad,
            capacity_high: self.capacity_high,
            r_tot_half_life: self.r_tot_half_life,
        };
        if alg == Algorithm::BapoMini {
            batch = mini_test_mode(batch);
        }
        // constructing validates thresholds and sizes
        BatchConstructor::new(batch.clone())?;

        let objective = ObjectiveConfig {
            clip_low: self.clip_low,
            clip_high,
            kl_coef: self.kl_coef,
            entropy_coef: self.entropy_coef,
            ratio_mode: self.ratio_mode,
            clip_replayed: self.clip_replayed,
        };
        objective.validate()?;

        let kl_target = self.kl_target.unwrap_or(if alg.uses_buffers() {
            KlTarget::Rollout
        } else {
            KlTarget::Reference
        });
        Ok(Plan {
            rollout_delay,
            batch,
            objective,
            kl_target,
            dynamic_sampling: alg == Algorithm::Dapo,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPurpose {
    Fresh,
    Reevaluation,
    DapoResample,
    Evaluation,
}

/// Groups rolled out in one step, by purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerStep {
    pub step: u64,
    pub fresh: u64,
    pub reevaluation: u64,
    pub dapo_resample: u64,
    pub evaluation: u64,
}

impl LedgerStep {
    pub fn training(&self) -> u64 {
        self.fresh + self.reevaluation + self.dapo_resample
    }
}

/// Rollout accounting. Training totals exclude evaluation rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutLedger {
    pub group_size: usize,
    pub cumulative_groups: u64,
    pub cumulative_responses: u64,
    pub steps: Vec<LedgerStep>,
}

impl RolloutLedger {
    pub fn new(group_size: usize) -> Self {
        Self {
            group_size,
            cumulative_groups: 0,
            cumulative_responses: 0,
            steps: Vec::new(),
        }
    }

    pub fn record(&mut self, step: u64, purpose: RolloutPurpose, groups: u64) {
        if self.steps.last().map(|s| s.step) != Some(step) {
            self.steps.push(LedgerStep {
                step,
                ..Default::default()
            });
        }
        let entry = self.steps.last_mut().expect("pushed above");
        match purpose {
            RolloutPurpose::Fresh => entry.fresh += groups,
            RolloutPurpose::Reevaluation => entry.reevaluation += groups,
            RolloutPurpose::DapoResample => entry.dapo_resample += groups,
            RolloutPurpose::Evaluation => entry.evaluation += groups,
        }
        if purpose != RolloutPurpose::Evaluation {
            self.cumulative_groups += groups;
            self.cumulative_responses += groups * self.group_size as u64;
        }
    }

    pub fn total(&self, purpose: RolloutPurpose) -> u64 {
        self.steps
            .iter()
            .map(|s| match purpose {
                RolloutPurpose::Fresh => s.fresh,
                RolloutPurpose::Reevaluation => s.reevaluation,
                RolloutPurpose::DapoResample => s.dapo_resample,
                RolloutPurpose::Evaluation => s.evaluation,
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub group_size: usize,
    pub training_groups: u64,
    pub training_responses: u64,
    pub fresh_responses: u64,
    pub reevaluation_responses: u64,
    pub dapo_resample_responses: u64,
    pub evaluation_responses: u64,
}

pub fn ledger_report(ledger: &RolloutLedger) -> LedgerReport {
    let g = ledger.group_size as u64;
    LedgerReport {
        group_size: ledger.group_size,
        training_groups: ledger.cumulative_groups,
        training_responses: ledger.cumulative_responses,
        fresh_responses: g * ledger.total(RolloutPurpose::Fresh),
        reevaluation_responses: g * ledger.total(RolloutPurpose::Reevaluation),
        dapo_resample_responses: g * ledger.total(RolloutPurpose::DapoResample),
        evaluation_responses: g * ledger.total(RolloutPurpose::Evaluation),
    }
}

pub const PHASES: [&str; 5] = ["sync", "rollout", "admit", "construct", "update"];

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub algorithm: Algorithm,
    pub phases: Vec<String>,
    pub synced: bool,
    pub rollout_step: u64,
    pub mean_reward: f64,
    pub fresh_groups: usize,
    pub fresh_zero_variance: usize,
    pub dapo_rounds: usize,
    #[serde(flatten)]
    pub composition: Composition,
    pub x1_zero_variance: usize,
    pub skip: bool,
    #[serde(flatten)]
    pub loss: ObjectiveTerms,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub tv_to_rollout_mean: Option<f64>,
    pub tv_to_rollout_max: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
    pub policy_entropy: f64,
    pub step_fresh_groups: u64,
    pub step_reeval_groups: u64,
    pub step_dapo_groups: u64,
    pub cumulative_groups: u64,
    pub cumulative_responses: u64,
    pub cumulative_eval_responses: u64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub r_tot: f64,
    pub admitted_bad: usize,
    pub admitted_high: usize,
    pub buffer_bad: usize,
    pub buffer_high: usize,
    pub mastered: usize,
    pub floor_violations: usize,
    pub bins: Option<Vec<usize>>,
}

/// Accuracy-bin census of the tracked prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: u64,
    pub bins: Vec<usize>,
    /// Bin per tracked prompt, in tracked order.
    pub assignments: Vec<usize>,
    pub mean_reward: f64,
    pub exact_mean_reward: f64,
    /// Expected reward per tracked prompt, in tracked order.
    pub exact_rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditGroup {
    pub subset: Subset,
    pub prompt: PromptId,
    pub mean: f64,
    pub variance: f64,
    pub floor: f64,
    pub origin_mean: Option<f64>,
    pub behavior_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: u64,
    pub groups: Vec<AuditGroup>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: TrainerConfig,
    pub records: Vec<MetricsRecord>,
    pub evaluations: Vec<EvalSnapshot>,
    pub audits: Vec<StepAudit>,
    pub tracked: Vec<PromptId>,
    pub final_policy: PolicyParams,
    pub ledger: RolloutLedger,
    pub bad_buffer: FifoBuffer,
    pub high_buffer: FifoBuffer,
}

impl RunOutput {
    /// Unlocked fraction between the first and last evaluations.
    pub fn unlocked_fraction(&self) -> Option<f64> {
        let first = self.evaluations.first()?;
        let last = self.evaluations.last()?;
        crate::metrics::unlocked_fraction(&first.assignments, &last.assignments)
    }
}

const STREAM_PROMPTS: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_SELECTION: u64 = 3;
const STREAM_REEVAL: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_TRACKING: u64 = 6;

/// Independent ChaCha stream `id` under `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The fixed tracked subset: the whole universe when it is small enough,
/// otherwise `count` prompts drawn with the tracking seed, in id order.
pub fn tracked_prompts(universe: &PromptUniverse, count: usize, tracking_seed: u64) -> Vec<PromptId> {
    if count >= universe.len() {
        return (0..universe.len()).map(PromptId).collect();
    }
    let mut rng = rng_stream(tracking_seed, STREAM_TRACKING);
    let mut ids = universe.sample_prompts(count, &HashSet::new(), &mut rng);
    ids.sort();
    ids
}

fn rollout_many(
    policy: &PolicyParams,
    universe: &PromptUniverse,
    prompts: &[PromptId],
    group_size: usize,
    eps_smooth: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ResponseGroup>> {
    prompts
        .iter()
        .map(|&p| rollout_group(policy, universe.prompt(p)?, group_size, eps_smooth, rng))
        .collect()
}

fn evaluate_tracked(
    policy: &PolicyParams,
    universe: &PromptUniverse,
    tracked: &[PromptId],
    config: &TrainerConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSnapshot> {
    let groups = rollout_many(policy, universe, tracked, config.group_size, config.eps_smooth, rng)?;
    let assignments: Vec<usize> = groups.iter().map(|g| g.successes()).collect();
    let n = tracked.len().max(1) as f64;
    let exact_rewards = tracked
        .iter()
        .map(|&p| universe.prompt(p)?.exact_expected_reward(policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSnapshot {
        step,
        bins: bin_histogram(&assignments, config.group_size)?,
        mean_reward: groups.iter().map(|g| g.mean()).sum::<f64>() / n,
        exact_mean_reward: exact_rewards.iter().sum::<f64>() / n,
        assignments,
        exact_rewards,
    })
}

/// `(mean, max)` of exact TV between two policies over all prompts.
fn tv_summary(p: &PolicyParams, q: &PolicyParams, n: usize) -> Option<(f64, f64)> {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for i in 0..n {
        let tv = exact_tv(p, q, PromptId(i)).ok()?;
        sum += tv;
        max = max.max(tv);
    }
    Some((sum / n as f64, max))
}

fn max_tv<'a>(
    policy: &PolicyParams,
    groups: impl Iterator<Item = &'a BatchGroup>,
    behavior: impl Fn(&BatchGroup) -> Option<&'a PolicyParams>,
) -> Option<f64> {
    let mut out: Option<f64> = None;
    for g in groups {
        let b = behavior(g)?;
        let tv = exact_tv(policy, b, g.group.prompt).ok()?;
        out = Some(out.map_or(tv, |m| m.max(tv)));
    }
    out
}

fn failure_dump(step: u64, policy: &PolicyParams, batch: &TrainingBatch) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "num_prompts": policy.num_prompts(),
        "vocab_size": policy.vocab_size(),
        "max_len": policy.max_len(),
        "logits": policy.logits(),
        "batch": batch,
    });
    Error::NonFiniteLoss {
        step,
        dump: Box::new(dump),
    }
}

fn mean_entropy(policy: &PolicyParams) -> Result<f64> {
    let n = policy.num_prompts();
    let mut sum = 0.0;
    for i in 0..n {
        sum += policy.entropy(PromptId(i))?;
    }
    Ok(sum / n as f64)
}

/// Splits a batch into `parts` contiguous minibatches.
fn minibatches(batch: &TrainingBatch, parts: usize) -> Vec<TrainingBatch> {
    if parts <= 1 {
        return vec![batch.clone()];
    }
    let groups: Vec<BatchGroup> = batch.groups().cloned().collect();
    let chunk = groups.len().div_ceil(parts).max(1);
    let cap = batch.size_cap.div_ceil(parts);
    groups
        .chunks(chunk)
        .map(|c| TrainingBatch {
            x1: c.to_vec(),
            size_cap: cap,
            ..Default::default()
        })
        .collect()
}

/// Runs `config.total_steps` training steps on `universe`.
pub fn run(config: &TrainerConfig, universe: &PromptUniverse) -> Result<RunOutput> {
    let plan = config.plan()?;
    let g = config.group_size;
    let mut policy = universe.initial_policy();
    let reference = policy.clone();
    let mut alpha = policy.clone();
    let mut alpha_snapshots: BTreeMap<u64, PolicyParams> = BTreeMap::new();
    let mut constructor = BatchConstructor::new(plan.batch.clone())?;
    let mut ledger = RolloutLedger::new(g);

    let mut prompt_rng = rng_stream(config.seed, STREAM_PROMPTS);
    let mut rollout_rng = rng_stream(config.seed, STREAM_ROLLOUT);
    let mut selection_rng = rng_stream(config.seed, STREAM_SELECTION);
    let mut reeval_rng = rng_stream(config.seed, STREAM_REEVAL);
    let mut eval_rng = rng_stream(config.seed, STREAM_EVAL);

    let tracked = tracked_prompts(universe, config.track_subset, config.tracking_seed);
    let mut records = Vec::with_capacity(config.total_steps as usize);
    let mut evaluations = Vec::new();
    let mut audits = Vec::with_capacity(config.total_steps as usize);
    let n_prompts = universe.len();
    let keep_snapshots = plan.rollout_delay + config.recency_window + 1;

    for t in 0..config.total_steps {
        // sync
        let synced = t % plan.rollout_delay == 0;
        if synced {
            alpha = policy.clone();
            alpha_snapshots.insert(alpha.step_tag(), alpha.clone());
            let oldest = alpha.step_tag().saturating_sub(keep_snapshots);
            alpha_snapshots = alpha_snapshots.split_off(&oldest);
        }

        let bins = if t % config.eval_every == 0 {
            let snap = evaluate_tracked(&policy, universe, &tracked, config, t, &mut eval_rng)?;
            ledger.record(t, RolloutPurpose::Evaluation, tracked.len() as u64);
            let b = snap.bins.clone();
            evaluations.push(snap);
            Some(b)
        } else {
            None
        };

        // rollout
        let prompts = universe.sample_prompts(config.rollout_batch, &HashSet::new(), &mut prompt_rng);
        let fresh = rollout_many(&alpha, universe, &prompts, g, config.eps_smooth, &mut rollout_rng)?;
        ledger.record(t, RolloutPurpose::Fresh, fresh.len() as u64);
        let mean_reward = fresh.iter().map(|x| x.mean()).sum::<f64>() / fresh.len().max(1) as f64;
        let fresh_groups = fresh.len();

        let tv_pair = if config.monitor_tv {
            tv_summary(&policy, &alpha, n_prompts)
        } else {
            None
        };
        let policy_entropy = mean_entropy(&policy)?;

        // admit + construct
        let thresholds_before = constructor.thresholds().clone();
        let admissions = constructor.admit(&fresh, t)?;
        let mut dapo_rounds = 1;
        let (batch, fresh_zero_variance, x1_zero_variance, mastered, reeval_groups, th_used) =
            if plan.dynamic_sampling {
                let fresh_zero_variance = fresh.iter().filter(|x| x.is_zero_variance()).count();
                let mut used: HashSet<PromptId> = prompts.iter().copied().collect();
                let mut valid: Vec<ResponseGroup> =
                    fresh.into_iter().filter(|x| !x.is_zero_variance()).collect();
                while valid.len() < config.batch_size && dapo_rounds < config.dapo_max_resample {
                    let more = universe.sample_prompts(config.rollout_batch, &used, &mut prompt_rng);
                    if more.is_empty() {
                        break;
                    }
                    used.extend(more.iter().copied());
                    let extra =
                        rollout_many(&alpha, universe, &more, g, config.eps_smooth, &mut rollout_rng)?;
                    ledger.record(t, RolloutPurpose::DapoResample, extra.len() as u64);
                    dapo_rounds += 1;
                    valid.extend(extra.into_iter().filter(|x| !x.is_zero_variance()));
                }
                valid.truncate(config.batch_size);
                (
                    TrainingBatch::from_fresh(valid, config.batch_size),
                    fresh_zero_variance,
                    0,
                    0,
                    0,
                    thresholds_before,
                )
            } else {
                let out = constructor.construct(
                    fresh,
                    t,
                    &policy,
                    universe,
                    &mut selection_rng,
                    &mut reeval_rng,
                )?;
                (
                    out.batch,
                    out.fresh_zero_variance,
                    out.x1_zero_variance,
                    out.mastered,
                    out.reevaluated_groups,
                    out.thresholds_used,
                )
            };
        if reeval_groups > 0 {
            ledger.record(t, RolloutPurpose::Reevaluation, reeval_groups as u64);
        }

        let audit = StepAudit {
            step: t,
            groups: batch
                .groups()
                .map(|bg| AuditGroup {
                    subset: bg.subset,
                    prompt: bg.group.prompt,
                    mean: bg.group.mean(),
                    variance: bg.group.stats.variance(),
                    floor: bg.floor,
                    origin_mean: bg.origin_mean,
                    behavior_step: bg.group.behavior_step,
                })
                .collect(),
        };
        let floor_violations = batch.groups().filter(|bg| !bg.meets_floor()).count();

        // update
        let kl_target = match plan.kl_target {
            KlTarget::Reference => Some(&reference),
            KlTarget::Rollout => Some(&alpha),
            KlTarget::None => None,
        };
        let skip = batch.is_empty();
        let pre_update = policy.clone();
        let (loss, grad_norm, clip_fraction) = if skip {
            (ObjectiveTerms::default(), 0.0, 0.0)
        } else {
            let parts = minibatches(&batch, config.minibatch_count);
            let mut loss = None;
            let mut sq = 0.0;
            let mut clipped = 0;
            let mut ratios = 0;
            for mb in &parts {
                let out = surrogate_gradient(&policy, mb, kl_target, &plan.objective)
                    .map_err(|e| match e {
                        Error::NonFiniteGradient => failure_dump(t, &policy, &batch),
                        other => other,
                    })?;
                if !out.terms.total.is_finite() {
                    return Err(failure_dump(t, &policy, &batch));
                }
                if parts.len() == 1 {
                    loss = Some(out.terms);
                }
                sq += out.grad_norm().powi(2);
                clipped += out.clipped;
                ratios += out.ratios;
                policy = policy
                    .apply_update(&out.gradient, config.learning_rate)
                    .map_err(|_| failure_dump(t, &policy, &batch))?;
            }
            let loss = match loss {
                Some(l) => l,
                None => objective(&pre_update, &batch, kl_target, &plan.objective)?,
            };
            let frac = if ratios == 0 { 0.0 } else { clipped as f64 / ratios as f64 };
            (loss, sq.sqrt(), frac)
        };
        policy = policy.with_step_tag(t + 1);

        let delta1 = max_tv(&policy, batch.x1.iter(), |_| Some(&alpha));
        let delta2 = max_tv(&policy, batch.x2.iter(), |_| Some(&pre_update));
        let delta3 = max_tv(&policy, batch.x3.iter(), |bg| {
            alpha_snapshots.get(&bg.group.behavior_step)
        });

        let step_ledger = ledger.steps.last().copied().unwrap_or_default();
        records.push(MetricsRecord {
            step: t,
            algorithm: config.algorithm,
            phases: PHASES.iter().map(|s| s.to_string()).collect(),
            synced,
            rollout_step: alpha.step_tag(),
            mean_reward,
            fresh_groups,
            fresh_zero_variance,
            dapo_rounds,
            composition: batch.composition(),
            x1_zero_variance,
            skip,
            loss,
            grad_norm,
            clip_fraction,
            tv_to_rollout_mean: tv_pair.map(|p| p.0),
            tv_to_rollout_max: tv_pair.map(|p| p.1),
            delta1,
            delta2,
            delta3,
            policy_entropy,
            step_fresh_groups: step_ledger.fresh,
            step_reeval_groups: step_ledger.reevaluation,
            step_dapo_groups: step_ledger.dapo_resample,
            cumulative_groups: ledger.cumulative_groups,
            cumulative_responses: ledger.cumulative_responses,
            cumulative_eval_responses: g as u64 * ledger.total(RolloutPurpose::Evaluation),
            c1: th_used.c1,
            c2: th_used.c2,
            c3: th_used.c3,
            r_tot: th_used.r_tot,
            admitted_bad: admissions.bad,
            admitted_high: admissions.high,
            buffer_bad: constructor.bad_buffer().len(),
            buffer_high: constructor.high_buffer().len(),
            mastered,
            floor_violations,
            bins,
        });
        audits.push(audit);
    }

    let last = config.total_steps;
    let snap = evaluate_tracked(&policy, universe, &tracked, config, last, &mut eval_rng)?;
    ledger.record(last, RolloutPurpose::Evaluation, tracked.len() as u64);
    evaluations.push(snap);

    Ok(RunOutput {
        config: config.clone(),
        records,
        evaluations,
        audits,
        tracked,
        final_policy: policy,
        ledger,
        bad_buffer: constructor.bad_buffer().clone(),
        high_buffer: constructor.high_buffer().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::UniverseConfig;

    fn small_universe() -> PromptUniverse {
        UniverseConfig {
            num_prompts: 48,
            ..UniverseConfig::default()
        }
        .build()
        .unwrap()
    }

    fn base(alg: Algorithm) -> TrainerConfig {
        TrainerConfig {
            algorithm: alg,
            batch_size: 16,
            rollout_batch: 16,
            total_steps: 20,
            track_subset: 48,
            eval_every: 5,
            learning_rate: 2.0,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn plan_defaults() {
        let p = base(Algorithm::Grpo).plan().unwrap();
        assert_eq!(p.rollout_delay, 1);
        assert!(!p.batch.enable_reevaluation && !p.batch.enable_replay);
        assert_eq!(p.kl_target, KlTarget::Reference);
        let p = base(Algorithm::Dapo).plan().unwrap();
        assert_eq!(p.objective.clip_high, 0.28);
        assert!(p.dynamic_sampling);
        let p = base(Algorithm::Bapo).plan().unwrap();
        assert_eq!(p.rollout_delay, 5);
        assert_eq!(p.kl_target, KlTarget::Rollout);
        let p = base(Algorithm::BapoMini).plan().unwrap();
        assert_eq!((p.batch.c1, p.batch.c2_range), (0.0, (0.5, 0.5)));
    }

    #[test]
    fn plan_rejects_bad_settings() {
        let bad = [
            TrainerConfig { rollout_delay: Some(5), ..base(Algorithm::Grpo) },
            TrainerConfig { rollout_delay: Some(0), ..base(Algorithm::Bapo) },
            TrainerConfig { reeval_every: 0, ..base(Algorithm::Bapo) },
            TrainerConfig { clip_low: 1.5, ..base(Algorithm::Bapo) },
            TrainerConfig { dapo_max_resample: 0, ..base(Algorithm::Dapo) },
            TrainerConfig { enable_replay: Some(true), ..base(Algorithm::Grpo) },
            TrainerConfig { c2_range: (0.5, 0.1), ..base(Algorithm::Bapo) },
            TrainerConfig { group_size: 1, ..base(Algorithm::Bapo) },
        ];
        for c in bad {
            assert!(c.plan().is_err(), "{c:?}");
        }
    }

    #[test]
    fn ledger_arithmetic() {
        let u = small_universe();
        let cfg = TrainerConfig {
            total_steps: 10,
            ..base(Algorithm::Grpo)
        };
        let out = run(&cfg, &u).unwrap();
        let r = ledger_report(&out.ledger);
        assert_eq!(r.training_responses, 10 * 16 * 8);
        assert_eq!(r.training_responses, 8 * r.training_groups);
        assert_eq!(r.evaluation_responses, 3 * 48 * 8);
    }

    #[test]
    fn delayed_sync_schedule() {
        let u = small_universe();
        let cfg = TrainerConfig {
            rollout_delay: Some(5),
            total_steps: 12,
            ..base(Algorithm::GrpoDelayed)
        };
        let out = run(&cfg, &u).unwrap();
        for r in &out.records {
            assert_eq!(r.synced, r.step % 5 == 0);
            assert_eq!(r.rollout_step, r.step - r.step % 5);
            if r.synced {
                assert_eq!(r.tv_to_rollout_max, Some(0.0));
            }
        }
    }

    #[test]
    fn reevaluation_only_on_schedule() {
        let u = small_universe();
        let out = run(&base(Algorithm::Bapo), &u).unwrap();
        for r in &out.records {
            if r.step % 5 != 0 || r.step == 0 {
                assert_eq!(r.composition.x2, 0);
                assert_eq!(r.step_reeval_groups, 0);
            }
        }
        assert!(out.records.iter().any(|r| r.step_reeval_groups > 0));
    }

    #[test]
    fn deterministic() {
        let u = small_universe();
        let a = run(&base(Algorithm::Bapo), &u).unwrap();
        let b = run(&base(Algorithm::Bapo), &u).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_policy, b.final_policy);
    }

    #[test]
    fn dapo_resamples_when_groups_degenerate() {
        let u = small_universe();
        let out = run(&base(Algorithm::Dapo), &u).unwrap();
        let r = ledger_report(&out.ledger);
        assert!(r.dapo_resample_responses > 0);
        assert!(out.records.iter().all(|r| r.dapo_rounds <= 4 && r.x1_zero_variance == 0));
    }

    #[test]
    fn minibatches_preserve_groups() {
        let u = small_universe();
        let cfg = TrainerConfig {
            minibatch_count: 4,
            ..base(Algorithm::Bapo)
        };
        let out = run(&cfg, &u).unwrap();
        assert_eq!(out.final_policy.step_tag(), 20);
    }
}
