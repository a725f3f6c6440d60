//! Numerical checks of the adaptive-batch policy-improvement lower bound,
//! its stability constants, the TV duality bound and the variance maximizer,
//! all by exhaustive enumeration on tiny instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{PromptSpec, PromptUniverse};
use crate::error::{Error, Result};
use crate::policy::{exact_tv, PolicyParams, PromptId, ResponseSeq};
use crate::trainer::rng_stream;

pub const THEORY_SCHEMA: &str = "bapo-theory/1";
pub const MARGIN_TOLERANCE: f64 = 1e-9;
pub const DUALITY_TOLERANCE: f64 = 1e-12;
/// Floor comparisons allow for rounding in enumerated expectations.
const FLOOR_SLACK: f64 = 1e-12;

/// `(1 - sqrt(f + eps)) / sqrt(f + eps)`; infinite when `f + eps = 0`.
pub fn k_from_floor(floor: f64, eps_smooth: f64) -> f64 {
    let s = (floor + eps_smooth).sqrt();
    if s == 0.0 {
        f64::INFINITY
    } else {
        (1.0 - s) / s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KConstants {
    pub group_size: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub eps_smooth: f64,
    /// Variance floors of the fresh, re-evaluated and replayed subsets.
    pub floors: [f64; 3],
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl KConstants {
    pub fn k(&self, subset: usize) -> f64 {
        [self.k1, self.k2, self.k3][subset]
    }
}

pub fn k_constants(group_size: usize, c1: f64, c2: f64, c3: f64, eps_smooth: f64) -> Result<KConstants> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    if ![c1, c2, c3].iter().all(|c| (0.0..=1.0).contains(c)) || c2 > c3 || !(eps_smooth >= 0.0) {
        return Err(Error::Config(format!(
            "need c in [0, 1], c2 <= c3 and eps >= 0 (got {c1}, {c2}, {c3}, {eps_smooth})"
        )));
    }
    let g = group_size as f64;
    let floors = [
        (g - 1.0) / (g * g),
        c1 * (1.0 - c1),
        (c2 * (1.0 - c2)).min(c3 * (1.0 - c3)),
    ];
    Ok(KConstants {
        group_size,
        c1,
        c2,
        c3,
        eps_smooth,
        floors,
        k1: k_from_floor(floors[0], eps_smooth),
        k2: k_from_floor(floors[1], eps_smooth),
        k3: k_from_floor(floors[2], eps_smooth),
    })
}

/// Policies and thresholds for one evaluation of the bound.
///
/// Subset behavior policies: fresh groups come from `rollout`, re-evaluated
/// groups from `current`, replayed groups from `buffer`. `historical` is the
/// buffer policy under which difficult prompts were first recorded.
#[derive(Clone, Debug)]
pub struct BoundInstance {
    pub universe: PromptUniverse,
    pub current: PolicyParams,
    pub candidate: PolicyParams,
    pub rollout: PolicyParams,
    pub historical: PolicyParams,
    pub buffer: PolicyParams,
    pub constants: KConstants,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetTerms {
    pub members: Vec<PromptId>,
    /// Sampling mass of the members.
    pub mass: f64,
    pub k: f64,
    /// Weighted sums over members.
    pub improvement: f64,
    pub surrogate: f64,
    pub candidate_tv_penalty: f64,
    pub current_tv_penalty: f64,
    /// Indicator-weighted lower-bound term.
    pub bound: f64,
    /// Same term averaged over the members instead of summed.
    pub renormalized_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub renormalized_rhs: f64,
    pub renormalized_margin: f64,
    pub subsets: [SubsetTerms; 3],
    /// Max TV between current and rollout policy over fresh members.
    pub delta1: Option<f64>,
    /// Max TV between current and buffer policy over replayed members.
    pub delta3: Option<f64>,
}

const SUBSET_NAMES: [&str; 3] = ["fresh", "reevaluated", "replayed"];

fn reward(spec: &PromptSpec, p: &PolicyParams) -> Result<f64> {
    spec.exact_expected_reward(p)
}

pub fn improvement_bound_check(inst: &BoundInstance) -> Result<BoundReport> {
    let k = &inst.constants;
    let g = k.group_size as f64;
    let mut subsets: [SubsetTerms; 3] = Default::default();
    for (i, s) in subsets.iter_mut().enumerate() {
        s.k = k.k(i);
    }
    let mut delta1: Option<f64> = None;
    let mut delta3: Option<f64> = None;

    for (spec, &w) in inst.universe.prompts().iter().zip(inst.universe.weights()) {
        let x = spec.id;
        let j_cand = reward(spec, &inst.candidate)?;
        let j_cur = reward(spec, &inst.current)?;
        let mu_roll = reward(spec, &inst.rollout)?;
        let mu_hist = reward(spec, &inst.historical)?;
        let mu_buf = reward(spec, &inst.buffer)?;

        let member = [
            1.0 / g <= mu_roll && mu_roll <= (g - 1.0) / g,
            mu_hist <= k.c1 && k.c1 < j_cur && j_cur < 1.0,
            k.c2 <= mu_buf && mu_buf <= k.c3,
        ];
        let behavior = [&inst.rollout, &inst.current, &inst.buffer];
        let mu_b = [mu_roll, j_cur, mu_buf];

        for i in 0..3 {
            if !member[i] {
                continue;
            }
            let var = mu_b[i] * (1.0 - mu_b[i]);
            if var < k.floors[i] - FLOOR_SLACK {
                return Err(Error::FloorViolation {
                    prompt: x,
                    subset: SUBSET_NAMES[i],
                    variance: var,
                    floor: k.floors[i],
                });
            }
            let sigma = (var + k.eps_smooth).sqrt();
            let tv_cand = exact_tv(&inst.candidate, behavior[i], x)?;
            let tv_cur = exact_tv(&inst.current, behavior[i], x)?;
            let l = (j_cand - mu_b[i]) / sigma;
            let s = &mut subsets[i];
            s.members.push(x);
            s.mass += w;
            s.improvement += w * (j_cand - j_cur);
            s.surrogate += w * l;
            s.candidate_tv_penalty += w * 2.0 * k.k(i) * tv_cand;
            s.current_tv_penalty += w * 2.0 * tv_cur;
            if i == 0 {
                delta1 = Some(delta1.map_or(tv_cur, |d| d.max(tv_cur)));
            }
            if i == 2 {
                delta3 = Some(delta3.map_or(tv_cur, |d| d.max(tv_cur)));
            }
        }
    }

    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut renormalized_rhs = 0.0;
    for s in &mut subsets {
        // an infinite K with a zero TV contributes nothing
        let pen = if s.candidate_tv_penalty.is_nan() { 0.0 } else { s.candidate_tv_penalty };
        s.candidate_tv_penalty = pen;
        s.bound = s.surrogate - pen - s.current_tv_penalty;
        s.renormalized_bound = (s.mass > 0.0).then(|| s.bound / s.mass);
        lhs += s.improvement;
        rhs += s.bound;
        renormalized_rhs += s.renormalized_bound.unwrap_or(0.0);
    }
    Ok(BoundReport {
        lhs,
        rhs,
        margin: lhs - rhs,
        renormalized_rhs,
        renormalized_margin: lhs - renormalized_rhs,
        subsets,
        delta1,
        delta3,
    })
}

/// `|E_p r - E_q r| <= 2 TV(p, q)` for a bounded reward table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn duality_check(r: &[f64], p: &[f64], q: &[f64]) -> Result<DualityOutcome> {
    if r.len() != p.len() || p.len() != q.len() {
        return Err(Error::ShapeMismatch("reward and distributions differ in length".into()));
    }
    if r.iter().any(|x| !(x.abs() <= 1.0)) {
        return Err(Error::Config("reward table must satisfy |r| <= 1".into()));
    }
    let lhs = r.iter().zip(p.iter().zip(q)).map(|(r, (a, b))| r * (a - b)).sum::<f64>().abs();
    let rhs = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(DualityOutcome {
        lhs,
        rhs,
        holds: lhs <= rhs + DUALITY_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceMaximum {
    pub group_size: usize,
    /// Every grid mean attaining the maximum.
    pub argmax: Vec<f64>,
    pub max: f64,
}

/// Maximizes `mu (1 - mu)` over `mu in {0, 1/G, ..., 1}` using integer
/// arithmetic on `k (G - k)`.
pub fn variance_maximizer_check(group_size: usize) -> Result<VarianceMaximum> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let g = group_size;
    let best = (0..=g).map(|k| k * (g - k)).max().expect("non-empty");
    let argmax = (0..=g)
        .filter(|k| k * (g - k) == best)
        .map(|k| k as f64 / g as f64)
        .collect();
    Ok(VarianceMaximum {
        group_size: g,
        argmax,
        max: best as f64 / (g * g) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub group_size: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub eps_smooth: f64,
    pub seed: u64,
    pub trials: usize,
    /// Largest per-prompt TV allowed between current/candidate and each
    /// behavior policy in the randomized suite.
    pub max_tv: f64,
    pub sweep_scales: Vec<f64>,
    pub sweep_trials: usize,
    pub adversarial_restarts: usize,
    pub adversarial_iterations: usize,
    pub duality_trials: usize,
    pub proposition_group_sizes: Vec<usize>,
    pub instance_prompts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Run the corrupted-floor fixture; the report then fails.
    pub corrupt_floor: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            c1: 1.0 / 8.0,
            c2: 0.25,
            c3: 0.5,
            eps_smooth: 1e-4,
            seed: 0,
            trials: 1000,
            max_tv: 0.05,
            sweep_scales: vec![0.05, 0.2, 0.5, 1.0, 2.0],
            sweep_trials: 200,
            adversarial_restarts: 50,
            adversarial_iterations: 200,
            duality_trials: 1000,
            proposition_group_sizes: vec![2, 3, 4, 5, 8, 16],
            instance_prompts: 6,
            vocab_size: 3,
            max_len: 2,
            corrupt_floor: false,
        }
    }
}

fn random_universe<R: Rng + ?Sized>(n: usize, v: usize, l: usize, rng: &mut R) -> Result<PromptUniverse> {
    let space = v.pow(l as u32) as u64;
    let prompts = (0..n)
        .map(|i| {
            let size = rng.gen_range(1..=space.max(2) - 1);
            let picked = rand::seq::index::sample(rng, space as usize, size as usize);
            let accepted = picked
                .into_iter()
                .map(|j| ResponseSeq::from_index(j as u64, v, l))
                .collect();
            PromptSpec::new(PromptId(i), accepted, v, l)
        })
        .collect::<Result<Vec<_>>>()?;
    PromptUniverse::new(v, l, prompts, None)
}

fn random_logits<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}

fn shaped(base: &PolicyParams, logits: Vec<f64>) -> Result<PolicyParams> {
    PolicyParams::from_logits(base.num_prompts(), base.vocab_size(), base.max_len(), logits, 0)
}

/// Perturbs `base`, halving the perturbation until every per-prompt TV to
/// `base` is at most `max_tv`.
fn perturb_within<R: Rng + ?Sized>(
    base: &PolicyParams,
    scale: f64,
    max_tv: f64,
    rng: &mut R,
) -> Result<PolicyParams> {
    let noise = random_logits(base.logits().len(), scale, rng);
    let mut factor = 1.0;
    loop {
        let z = base.logits().iter().zip(&noise).map(|(a, b)| a + factor * b).collect();
        let p = shaped(base, z)?;
        let mut worst: f64 = 0.0;
        for i in 0..base.num_prompts() {
            worst = worst.max(exact_tv(&p, base, PromptId(i))?);
        }
        if worst <= max_tv || factor < 1e-6 {
            return Ok(p);
        }
        factor *= 0.5;
    }
}

/// Random instance around a random current policy. Behavior policies and
/// the candidate are perturbations of the current policy bounded by
/// `max_tv` (pass a large value for unconstrained perturbations).
pub fn random_instance<R: Rng + ?Sized>(
    cfg: &TheoryConfig,
    constants: &KConstants,
    n_prompts: usize,
    scale: f64,
    max_tv: f64,
    rng: &mut R,
) -> Result<BoundInstance> {
    let universe = random_universe(n_prompts, cfg.vocab_size, cfg.max_len, rng)?;
    let len = n_prompts * cfg.vocab_size * cfg.max_len;
    let current = PolicyParams::from_logits(
        n_prompts,
        cfg.vocab_size,
        cfg.max_len,
        random_logits(len, 2.0, rng),
        0,
    )?;
    let historical = shaped(&current, random_logits(len, 3.0, rng))?;
    // half budgets keep every candidate/behavior pair within max_tv
    let rollout = perturb_within(&current, scale, max_tv / 2.0, rng)?;
    let buffer = perturb_within(&current, scale, max_tv / 2.0, rng)?;
    let candidate = perturb_within(&current, scale, max_tv / 2.0, rng)?;
    Ok(BoundInstance {
        universe,
        current,
        candidate,
        rollout,
        historical,
        buffer,
        constants: constants.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    fn of(mut xs: Vec<f64>) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        xs.sort_by(f64::total_cmp);
        Some(Self {
            count: xs.len(),
            min: xs[0],
            median: xs[xs.len() / 2],
            max: xs[xs.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizedReport {
    pub trials: usize,
    pub floor_rejections: usize,
    /// Draws with no prompt in any subset, where the margin is trivially 0.
    pub empty_rejections: usize,
    pub min_margin: f64,
    pub min_renormalized_margin: f64,
    pub violations: usize,
    pub subset_coverage: [usize; 3],
    pub delta1: Option<Spread>,
    pub delta3: Option<Spread>,
}

#[derive(Default)]
struct Rejections {
    floor: usize,
    empty: usize,
}

/// Draws instances until one satisfies every subset floor and has at least
/// one subset member.
fn draw_valid<R: Rng + ?Sized>(
    cfg: &TheoryConfig,
    k: &KConstants,
    n_prompts: usize,
    scale: f64,
    max_tv: f64,
    rng: &mut R,
    rejections: &mut Rejections,
) -> Result<(BoundInstance, BoundReport)> {
    for _ in 0..1000 {
        let inst = random_instance(cfg, k, n_prompts, scale, max_tv, rng)?;
        match improvement_bound_check(&inst) {
            Ok(rep) if rep.subsets.iter().all(|s| s.members.is_empty()) => rejections.empty += 1,
            Ok(rep) => return Ok((inst, rep)),
            Err(Error::FloorViolation { .. }) => rejections.floor += 1,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config("could not draw an instance satisfying the variance floors".into()))
}

pub fn randomized_suite(cfg: &TheoryConfig, k: &KConstants) -> Result<RandomizedReport> {
    let mut rng = rng_stream(cfg.seed, 11);
    let mut rej = Rejections::default();
    let mut min_margin = f64::INFINITY;
    let mut min_renorm = f64::INFINITY;
    let mut violations = 0;
    let mut coverage = [0; 3];
    let mut d1 = Vec::new();
    let mut d3 = Vec::new();
    for _ in 0..cfg.trials {
        let (_, rep) = draw_valid(cfg, k, cfg.instance_prompts, 1.0, cfg.max_tv, &mut rng, &mut rej)?;
        min_margin = min_margin.min(rep.margin);
        min_renorm = min_renorm.min(rep.renormalized_margin);
        violations += usize::from(rep.margin < -MARGIN_TOLERANCE);
        for (c, s) in coverage.iter_mut().zip(&rep.subsets) {
            *c += usize::from(!s.members.is_empty());
        }
        d1.extend(rep.delta1);
        d3.extend(rep.delta3);
    }
    Ok(RandomizedReport {
        trials: cfg.trials,
        floor_rejections: rej.floor,
        empty_rejections: rej.empty,
        min_margin,
        min_renormalized_margin: min_renorm,
        violations,
        subset_coverage: coverage,
        delta1: Spread::of(d1),
        delta3: Spread::of(d3),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBucket {
    pub scale: f64,
    pub trials: usize,
    pub max_delta: f64,
    pub min_margin: f64,
    pub violations: usize,
}

/// Margin behavior as the policies drift apart without any TV budget.
pub fn delta_sweep(cfg: &TheoryConfig, k: &KConstants) -> Result<Vec<SweepBucket>> {
    let mut rng = rng_stream(cfg.seed, 12);
    let mut rej = Rejections::default();
    cfg.sweep_scales
        .iter()
        .map(|&scale| {
            let mut b = SweepBucket {
                scale,
                trials: cfg.sweep_trials,
                max_delta: 0.0,
                min_margin: f64::INFINITY,
                violations: 0,
            };
            for _ in 0..cfg.sweep_trials {
                let (_, rep) =
                    draw_valid(cfg, k, cfg.instance_prompts, scale, f64::INFINITY, &mut rng, &mut rej)?;
                b.max_delta = b
                    .max_delta
                    .max(rep.delta1.unwrap_or(0.0))
                    .max(rep.delta3.unwrap_or(0.0));
                b.min_margin = b.min_margin.min(rep.margin);
                b.violations += usize::from(rep.margin < -MARGIN_TOLERANCE);
            }
            Ok(b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub restarts: usize,
    pub iterations: usize,
    pub min_margin: f64,
    pub violations: usize,
    pub note: String,
}

const LOGIT_BOX: f64 = 6.0;

/// Projected descent on the margin over the candidate's logits, one random
/// two-prompt instance per restart.
pub fn adversarial_search(cfg: &TheoryConfig, k: &KConstants) -> Result<AdversarialReport> {
    let mut rng = rng_stream(cfg.seed, 13);
    let mut rej = Rejections::default();
    let mut min_margin = f64::INFINITY;
    let mut violations = 0;
    let h = 1e-5;
    for _ in 0..cfg.adversarial_restarts {
        let (mut inst, _) = draw_valid(cfg, k, 2, 1.0, f64::INFINITY, &mut rng, &mut rej)?;
        let mut z: Vec<f64> = random_logits(inst.candidate.logits().len(), 3.0, &mut rng);
        let margin_at = |inst: &mut BoundInstance, z: &[f64]| -> Result<f64> {
            inst.candidate = shaped(&inst.current, z.to_vec())?;
            Ok(improvement_bound_check(inst)?.margin)
        };
        let mut best = margin_at(&mut inst, &z)?;
        let mut step = 0.5;
        for _ in 0..cfg.adversarial_iterations {
            let mut grad = vec![0.0; z.len()];
            for i in 0..z.len() {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                grad[i] = (margin_at(&mut inst, &zp)? - margin_at(&mut inst, &zm)?) / (2.0 * h);
            }
            let trial: Vec<f64> = z
                .iter()
                .zip(&grad)
                .map(|(a, g)| (a - step * g).clamp(-LOGIT_BOX, LOGIT_BOX))
                .collect();
            let m = margin_at(&mut inst, &trial)?;
            if m < best {
                best = m;
                z = trial;
            } else {
                step *= 0.5;
                if step < 1e-8 {
                    break;
                }
            }
        }
        min_margin = min_margin.min(best);
        violations += usize::from(best < -MARGIN_TOLERANCE);
    }
    Ok(AdversarialReport {
        restarts: cfg.adversarial_restarts,
        iterations: cfg.adversarial_iterations,
        min_margin,
        violations,
        note: "no violation found is evidence, not proof".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub trials: usize,
    pub failures: usize,
    pub max_excess: f64,
}

pub fn duality_suite(cfg: &TheoryConfig) -> Result<DualityReport> {
    let mut rng = rng_stream(cfg.seed, 14);
    let mut failures = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for t in 0..cfg.duality_trials {
        let n = 2 + t % 30;
        let dist = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w: Vec<f64> = (0..n).map(|_| (3.0 * rng.gen::<f64>()).exp() - 1.0).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = dist(&mut rng);
        let q = dist(&mut rng);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let out = duality_check(&r, &p, &q)?;
        failures += usize::from(!out.holds);
        max_excess = max_excess.max(out.lhs - out.rhs);
    }
    Ok(DualityReport {
        trials: cfg.duality_trials,
        failures,
        max_excess,
    })
}

/// A two-prompt instance whose re-evaluated member has mean 0.95, below the
/// re-evaluation variance floor.
pub fn corrupted_floor_instance(constants: &KConstants) -> Result<BoundInstance> {
    let (v, l) = (2, 1);
    let prompts = vec![
        PromptSpec::new(PromptId(0), vec![ResponseSeq::new(vec![0])], v, l)?,
        PromptSpec::new(PromptId(1), vec![ResponseSeq::new(vec![1])], v, l)?,
    ];
    let universe = PromptUniverse::new(v, l, prompts, None)?;
    let z = (0.95f64 / 0.05).ln();
    let current = PolicyParams::from_logits(2, v, l, vec![z, 0.0, z, 0.0], 0)?;
    let historical = PolicyParams::from_logits(2, v, l, vec![-10.0, 0.0, -10.0, 0.0], 0)?;
    Ok(BoundInstance {
        universe,
        candidate: current.clone(),
        rollout: current.clone(),
        buffer: current.clone(),
        current,
        historical,
        constants: constants.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema: String,
    pub config: TheoryConfig,
    pub constants: KConstants,
    pub k_monotone: bool,
    pub identity_margin: f64,
    pub randomized: RandomizedReport,
    pub sweep: Vec<SweepBucket>,
    pub adversarial: AdversarialReport,
    pub duality: DualityReport,
    pub proposition: Vec<VarianceMaximum>,
    pub floor_fixture: Option<String>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Kᵢ strictly decreases as the floor grows, on a grid of floors.
pub fn k_monotone(eps_smooth: f64) -> bool {
    let ks: Vec<f64> = (1..=25).map(|i| k_from_floor(i as f64 / 100.0, eps_smooth)).collect();
    ks.windows(2).all(|w| w[1] < w[0])
}

pub fn verify_theory(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let constants = k_constants(cfg.group_size, cfg.c1, cfg.c2, cfg.c3, cfg.eps_smooth)?;
    let mut failures = Vec::new();

    let mut rng = rng_stream(cfg.seed, 10);
    let id_inst = random_instance(cfg, &constants, cfg.instance_prompts, 1.0, 1.0, &mut rng)?;
    let same = BoundInstance {
        candidate: id_inst.current.clone(),
        rollout: id_inst.current.clone(),
        buffer: id_inst.current.clone(),
        ..id_inst
    };
    // the historical policy only decides membership; with all other policies
    // equal every term vanishes
    let identity_margin = match improvement_bound_check(&same) {
        Ok(r) => r.margin,
        Err(Error::FloorViolation { .. }) => 0.0,
        Err(e) => return Err(e),
    };
    if identity_margin.abs() > 1e-12 {
        failures.push(format!("identity instance margin {identity_margin}"));
    }

    let k_mono = k_monotone(cfg.eps_smooth);
    if !k_mono {
        failures.push("K is not decreasing in the variance floor".into());
    }

    let randomized = randomized_suite(cfg, &constants)?;
    if randomized.violations > 0 {
        failures.push(format!(
            "{} randomized trials violate the bound (min margin {})",
            randomized.violations, randomized.min_margin
        ));
    }
    let sweep = delta_sweep(cfg, &constants)?;
    let adversarial = adversarial_search(cfg, &constants)?;
    if adversarial.violations > 0 {
        failures.push(format!(
            "adversarial search found margin {}",
            adversarial.min_margin
        ));
    }
    let duality = duality_suite(cfg)?;
    if duality.failures > 0 {
        failures.push(format!("{} duality failures", duality.failures));
    }
    let proposition = cfg
        .proposition_group_sizes
        .iter()
        .map(|&g| variance_maximizer_check(g))
        .collect::<Result<Vec<_>>>()?;
    for p in &proposition {
        if p.group_size % 2 == 0 && (p.argmax != vec![0.5] || p.max != 0.25) {
            failures.push(format!("variance maximizer wrong for G = {}", p.group_size));
        }
    }

    let floor_fixture = if cfg.corrupt_floor {
        let msg = match improvement_bound_check(&corrupted_floor_instance(&constants)?) {
            Err(e @ Error::FloorViolation { .. }) => e.to_string(),
            Err(e) => return Err(e),
            Ok(_) => "corrupted floor went undetected".into(),
        };
        failures.push(format!("floor fixture: {msg}"));
        Some(msg)
    } else {
        None
    };

    Ok(TheoryReport {
        schema: THEORY_SCHEMA.into(),
        config: cfg.clone(),
        constants,
        k_monotone: k_mono,
        identity_margin,
        randomized,
        sweep,
        adversarial,
        duality,
        proposition,
        floor_fixture,
        passed: failures.is_empty(),
        failures,
    })
}
