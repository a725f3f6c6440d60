//! Clipped importance-weighted surrogate with KL and entropy terms, and its
//! analytic gradient with respect to the logits.
//!
//! For a batch with size cap `B` the maximized scalar is
//!
//! ```text
//! J = 1/B * sum_groups [ 1/G sum_i 1/L sum_t min(rho_t A_i, clip(rho_t) A_i)
//!                        - beta * KL(pi || target)(x) + c_H * H(pi)(x) ]
//! ```
//!
//! `rho_t` is the per-token ratio against the log-probability stored when the
//! group was generated. In sequence mode the per-token average is replaced by
//! a single length-normalized sequence ratio.

use serde::{Deserialize, Serialize};

use crate::batch::{Subset, TrainingBatch};
use crate::error::{Error, Result};
use crate::group::ResponseGroup;
use crate::policy::{PolicyParams, PromptId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    #[default]
    Token,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub ratio_mode: RatioMode,
    /// Apply the clip to replayed groups as well.
    pub clip_replayed: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef: 0.0,
            entropy_coef: 0.0,
            ratio_mode: RatioMode::Token,
            clip_replayed: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let band = |e: f64| e > 0.0 && e < 1.0;
        if !band(self.clip_low) || !(self.clip_high > 0.0 && self.clip_high.is_finite()) {
            return Err(Error::Config(format!(
                "clip range ({}, {}) invalid",
                self.clip_low, self.clip_high
            )));
        }
        if !(self.kl_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("kl_coef and entropy_coef must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub surrogate: f64,
    pub kl: f64,
    pub entropy: f64,
    /// `surrogate - kl_coef * kl + entropy_coef * entropy`.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GradientOutput {
    pub gradient: Vec<f64>,
    pub terms: ObjectiveTerms,
    /// Set when the batch held no groups; the gradient is then zero.
    pub empty_batch: bool,
    pub clipped: usize,
    pub ratios: usize,
}

impl GradientOutput {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.ratios == 0 {
            0.0
        } else {
            self.clipped as f64 / self.ratios as f64
        }
    }
}

/// Value and slope of `min(rho A, clip(rho) A)` as a function of `rho`.
fn clipped_term(rho: f64, adv: f64, lo: f64, hi: f64, clip: bool) -> (f64, f64, bool) {
    if !clip {
        return (rho * adv, adv, false);
    }
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - lo, 1.0 + hi) * adv;
    if unclipped <= clipped {
        (unclipped, adv, false)
    } else {
        (clipped, 0.0, true)
    }
}

fn check_batch(params: &PolicyParams, batch: &TrainingBatch) -> Result<()> {
    if batch.size_cap == 0 {
        return Err(Error::Config("batch size cap must be positive".into()));
    }
    for bg in batch.groups() {
        let g = &bg.group;
        if g.responses.len() != g.stats.advantages.len()
            || g.responses.len() != g.behavior_token_log_probs.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "group for prompt {} is inconsistent",
                g.prompt
            )));
        }
        for lps in &g.behavior_token_log_probs {
            if lps.len() != params.max_len() {
                return Err(Error::ShapeMismatch(
                    "behavior log-probabilities do not match response length".into(),
                ));
            }
            if let Some(&bad) = lps.iter().find(|lp| !lp.is_finite()) {
                return Err(Error::RatioOverflow(bad));
            }
        }
    }
    Ok(())
}

/// Per-prompt KL and entropy with their logit gradients accumulated into
/// `grad` with the given scales.
fn regularizers(
    params: &PolicyParams,
    target: Option<&PolicyParams>,
    prompt: PromptId,
    kl_scale: f64,
    ent_scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let v = params.vocab_size();
    let mut kl = 0.0;
    let mut ent = 0.0;
    let mut grad = grad;
    for pos in 0..params.max_len() {
        let lp = params.row_log_probs(prompt, pos)?;
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let h_t: f64 = -p.iter().zip(lp).map(|(pi, l)| pi * l).sum::<f64>();
        ent += h_t;
        let lq = match target {
            Some(t) => Some(t.row_log_probs(prompt, pos)?),
            None => None,
        };
        let kl_t = match lq {
            Some(lq) => p
                .iter()
                .zip(lp.iter().zip(lq))
                .map(|(pi, (a, b))| pi * (a - b))
                .sum::<f64>(),
            None => 0.0,
        };
        kl += kl_t;
        if let Some(g) = grad.as_deref_mut() {
            let off = params.row_offset(prompt, pos);
            for j in 0..v {
                let mut d = ent_scale * -p[j] * (lp[j] + h_t);
                if let Some(lq) = lq {
                    d += kl_scale * p[j] * (lp[j] - lq[j] - kl_t);
                }
                g[off + j] += d;
            }
        }
    }
    Ok((kl, ent))
}

struct Evaluation {
    terms: ObjectiveTerms,
    clipped: usize,
    ratios: usize,
}

fn evaluate(
    params: &PolicyParams,
    batch: &TrainingBatch,
    target: Option<&PolicyParams>,
    config: &ObjectiveConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<Evaluation> {
    config.validate()?;
    check_batch(params, batch)?;
    let inv_b = 1.0 / batch.size_cap as f64;
    let l = params.max_len();
    let (lo, hi) = (config.clip_low, config.clip_high);
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut entropy = 0.0;
    let mut clipped = 0;
    let mut ratios = 0;

    for bg in batch.groups() {
        let group: &ResponseGroup = &bg.group;
        let clip = config.clip_replayed || bg.subset != Subset::Replayed;
        let prompt = group.prompt;
        let w_group = inv_b / group.group_size() as f64;
        for ((y, adv), blps) in group
            .responses
            .iter()
            .zip(&group.stats.advantages)
            .zip(&group.behavior_token_log_probs)
        {
            let cur = params.token_log_probs(prompt, y)?;
            match config.ratio_mode {
                RatioMode::Token => {
                    let w = w_group / l as f64;
                    for (t, (c, b)) in cur.iter().zip(blps).enumerate() {
                        let rho = (c - b).exp();
                        let (val, slope, was_clipped) = clipped_term(rho, *adv, lo, hi, clip);
                        surrogate += w * val;
                        ratios += 1;
                        clipped += usize::from(was_clipped);
                        if let Some(g) = grad.as_deref_mut() {
                            let coef = w * slope * rho;
                            if coef != 0.0 {
                                add_score(params, prompt, t, y.tokens()[t], coef, g)?;
                            }
                        }
                    }
                }
                RatioMode::Sequence => {
                    let diff: f64 = cur.iter().sum::<f64>() - blps.iter().sum::<f64>();
                    let s = (diff / l as f64).exp();
                    let (val, slope, was_clipped) = clipped_term(s, *adv, lo, hi, clip);
                    surrogate += w_group * val;
                    ratios += 1;
                    clipped += usize::from(was_clipped);
                    if let Some(g) = grad.as_deref_mut() {
                        let coef = w_group * slope * s / l as f64;
                        if coef != 0.0 {
                            for t in 0..l {
                                add_score(params, prompt, t, y.tokens()[t], coef, g)?;
                            }
                        }
                    }
                }
            }
        }
        let (k, h) = regularizers(
            params,
            target,
            prompt,
            -config.kl_coef * inv_b,
            config.entropy_coef * inv_b,
            grad.as_deref_mut(),
        )?;
        kl += inv_b * k;
        entropy += inv_b * h;
    }
    Ok(Evaluation {
        terms: ObjectiveTerms {
            surrogate,
            kl,
            entropy,
            total: surrogate - config.kl_coef * kl + config.entropy_coef * entropy,
        },
        clipped,
        ratios,
    })
}

/// Adds `coef * d log pi(y_t) / d logits` for one position.
fn add_score(
    params: &PolicyParams,
    prompt: PromptId,
    pos: usize,
    token: u32,
    coef: f64,
    grad: &mut [f64],
) -> Result<()> {
    let lp = params.row_log_probs(prompt, pos)?;
    let off = params.row_offset(prompt, pos);
    for (j, l) in lp.iter().enumerate() {
        let ind = if j == token as usize { 1.0 } else { 0.0 };
        grad[off + j] += coef * (ind - l.exp());
    }
    Ok(())
}

/// Scalar objective. `kl_target = None` drops the KL term.
pub fn objective(
    params: &PolicyParams,
    batch: &TrainingBatch,
    kl_target: Option<&PolicyParams>,
    config: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    Ok(evaluate(params, batch, kl_target, config, None)?.terms)
}

/// Analytic gradient of [`objective`] with respect to every logit.
pub fn surrogate_gradient(
    params: &PolicyParams,
    batch: &TrainingBatch,
    kl_target: Option<&PolicyParams>,
    config: &ObjectiveConfig,
) -> Result<GradientOutput> {
    if let Some(t) = kl_target {
        if !params.same_shape(t) {
            return Err(Error::ShapeMismatch("KL target differs in shape".into()));
        }
    }
    let mut gradient = vec![0.0; params.logits().len()];
    if batch.is_empty() {
        return Ok(GradientOutput {
            gradient,
            terms: ObjectiveTerms::default(),
            empty_batch: true,
            clipped: 0,
            ratios: 0,
        });
    }
    let ev = evaluate(params, batch, kl_target, config, Some(&mut gradient))?;
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(GradientOutput {
        gradient,
        terms: ev.terms,
        empty_batch: false,
        clipped: ev.clipped,
        ratios: ev.ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{BatchGroup, Subset};
    use crate::group::compute_group_stats;
    use crate::policy::ResponseSeq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make_group(
        behavior: &PolicyParams,
        prompt: usize,
        responses: Vec<Vec<u32>>,
        rewards: Vec<u8>,
    ) -> ResponseGroup {
        let responses: Vec<ResponseSeq> = responses.into_iter().map(ResponseSeq::new).collect();
        let lps = responses
            .iter()
            .map(|y| behavior.token_log_probs(PromptId(prompt), y).unwrap())
            .collect();
        ResponseGroup {
            prompt: PromptId(prompt),
            responses,
            stats: compute_group_stats(&rewards, 1e-4).unwrap(),
            rewards,
            behavior_token_log_probs: lps,
            behavior_step: behavior.step_tag(),
        }
    }

    fn central_difference(
        params: &PolicyParams,
        batch: &TrainingBatch,
        target: Option<&PolicyParams>,
        config: &ObjectiveConfig,
        h: f64,
    ) -> Vec<f64> {
        let base = params.logits().to_vec();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let f = |z: Vec<f64>| {
                    let p = PolicyParams::from_logits(
                        params.num_prompts(),
                        params.vocab_size(),
                        params.max_len(),
                        z,
                        0,
                    )
                    .unwrap();
                    objective(&p, batch, target, config).unwrap().total
                };
                (f(plus) - f(minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        diff / scale
    }

    #[test]
    fn zero_advantages_zero_gradient() {
        let pol = PolicyParams::uniform(2, 3, 2);
        let g = make_group(&pol, 0, vec![vec![0, 1], vec![2, 2]], vec![0, 0]);
        let batch = TrainingBatch::from_fresh(vec![g], 4);
        let out = surrogate_gradient(&pol, &batch, None, &ObjectiveConfig::default()).unwrap();
        assert!(out.gradient.iter().all(|&x| x == 0.0));
        assert!(!out.empty_batch);
    }

    #[test]
    fn empty_batch_flagged() {
        let pol = PolicyParams::uniform(2, 3, 2);
        let out = surrogate_gradient(&pol, &TrainingBatch::new(4), None, &ObjectiveConfig::default())
            .unwrap();
        assert!(out.empty_batch);
        assert!(out.gradient.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn in_band_matches_score_times_ratio() {
        // V=2, L=1: behavior (0.5, 0.5), current (0.55, 0.45); ratio 1.1 on token 0.
        let behavior = PolicyParams::uniform(1, 2, 1);
        let cur =
            PolicyParams::from_logits(1, 2, 1, vec![(0.55f64 / 0.45).ln(), 0.0], 1).unwrap();
        let g = make_group(&behavior, 0, vec![vec![0], vec![1]], vec![1, 0]);
        let adv = g.stats.advantages[0];
        let batch = TrainingBatch::from_fresh(vec![g], 1);
        let cfg = ObjectiveConfig::default();
        let out = surrogate_gradient(&cur, &batch, None, &cfg).unwrap();
        // sample 0: rho=1.1, A>0; sample 1: rho=0.9, A<0; both in band
        let p0 = 0.55;
        let expect0 = 0.5 * (adv * 1.1 * (1.0 - p0) + (-adv) * 0.9 * (0.0 - p0));
        assert!((out.gradient[0] - expect0).abs() < 1e-12);
        let fd = central_difference(&cur, &batch, None, &cfg, 1e-6);
        assert!(rel_err(&out.gradient, &fd) < 1e-6);
        assert_eq!(out.clipped, 0);
    }

    #[test]
    fn clipped_plateau_has_zero_gradient() {
        let behavior = PolicyParams::uniform(1, 2, 1);
        let cur = PolicyParams::from_logits(1, 2, 1, vec![3.0, 0.0], 1).unwrap();
        let g = make_group(&behavior, 0, vec![vec![0], vec![0]], vec![1, 0]);
        // both responses are token 0: rho ~ 1.9; A>0 clipped, A<0 unclipped.
        let mut g1 = g.clone();
        g1.stats.advantages = vec![1.0, 1.0];
        let batch = TrainingBatch::from_fresh(vec![g1], 1);
        let cfg = ObjectiveConfig::default();
        let out = surrogate_gradient(&cur, &batch, None, &cfg).unwrap();
        assert!(out.gradient.iter().all(|&x| x == 0.0));
        assert_eq!(out.clipped, 2);
        let fd = central_difference(&cur, &batch, None, &cfg, 1e-6);
        assert!(fd.iter().all(|x| x.abs() < 1e-9));
        let terms = objective(&cur, &batch, None, &cfg).unwrap();
        assert!((terms.surrogate - 1.2).abs() < 1e-12);
    }

    #[test]
    fn clip_factor_for_positive_advantage() {
        let (v, a) = (2.0, 0.7);
        let (val, slope, c) = clipped_term(v, a, 0.2, 0.2, true);
        assert!((val - 1.2 * a).abs() < 1e-15);
        assert_eq!(slope, 0.0);
        assert!(c);
        let (val, _, c) = clipped_term(v, a, 0.2, 0.2, false);
        assert_eq!(val, 2.0 * a);
        assert!(!c);
        // negative advantage with a large ratio stays unclipped
        let (val, slope, _) = clipped_term(v, -a, 0.2, 0.2, true);
        assert_eq!((val, slope), (-2.0 * a, -a));
    }

    #[test]
    fn positive_sample_gains_probability() {
        let pol = PolicyParams::uniform(1, 4, 2);
        let g = make_group(
            &pol,
            0,
            vec![vec![1, 2], vec![0, 0], vec![3, 0], vec![0, 3]],
            vec![1, 0, 0, 0],
        );
        let y = g.responses[0].clone();
        let batch = TrainingBatch::from_fresh(vec![g], 1);
        let cfg = ObjectiveConfig {
            kl_coef: 0.01,
            entropy_coef: 0.001,
            ..ObjectiveConfig::default()
        };
        let out = surrogate_gradient(&pol, &batch, Some(&pol), &cfg).unwrap();
        let next = pol.apply_update(&out.gradient, 0.5).unwrap();
        assert!(next.log_prob(PromptId(0), &y).unwrap() > pol.log_prob(PromptId(0), &y).unwrap());
    }

    fn random_case(seed: u64) -> (PolicyParams, PolicyParams, TrainingBatch, ObjectiveConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, v, l) = (3, rng.gen_range(2..5), rng.gen_range(1..4));
        let logits = |rng: &mut ChaCha8Rng| {
            (0..p * v * l).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>()
        };
        let behavior = PolicyParams::from_logits(p, v, l, logits(&mut rng), 0).unwrap();
        let base = behavior.logits().to_vec();
        let cur_logits = base.iter().map(|z| z + rng.gen_range(-0.4..0.4)).collect();
        let cur = PolicyParams::from_logits(p, v, l, cur_logits, 1).unwrap();
        let target = PolicyParams::from_logits(p, v, l, logits(&mut rng), 0).unwrap();
        let mut batch = TrainingBatch::new(rng.gen_range(2..6));
        for prompt in 0..p {
            let g_size = rng.gen_range(2..6);
            let mut group = make_group(
                &behavior,
                prompt,
                (0..g_size)
                    .map(|_| behavior.sample_response(PromptId(prompt), &mut rng).unwrap().tokens().to_vec())
                    .collect(),
                (0..g_size).map(|_| rng.gen_range(0..2u8)).collect(),
            );
            if group.is_zero_variance() {
                group.stats.advantages = (0..g_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            }
            let subset = [Subset::Fresh, Subset::Reevaluated, Subset::Replayed][prompt];
            let bg = BatchGroup {
                subset,
                ..BatchGroup::fresh(group)
            };
            match subset {
                Subset::Fresh => batch.x1.push(bg),
                Subset::Reevaluated => batch.x2.push(bg),
                Subset::Replayed => batch.x3.push(bg),
            }
        }
        let cfg = ObjectiveConfig {
            clip_low: 0.2,
            clip_high: rng.gen_range(0.2..0.3),
            kl_coef: rng.gen_range(0.0..0.2),
            entropy_coef: rng.gen_range(0.0..0.05),
            ratio_mode: if rng.gen_bool(0.3) { RatioMode::Sequence } else { RatioMode::Token },
            clip_replayed: rng.gen_bool(0.5),
        };
        (cur, target, batch, cfg)
    }

    fn near_kink(params: &PolicyParams, batch: &TrainingBatch, cfg: &ObjectiveConfig) -> bool {
        let l = params.max_len() as f64;
        batch.groups().any(|bg| {
            let g = &bg.group;
            g.responses.iter().zip(&g.behavior_token_log_probs).any(|(y, b)| {
                let cur = params.token_log_probs(g.prompt, y).unwrap();
                let rhos: Vec<f64> = match cfg.ratio_mode {
                    RatioMode::Token => cur.iter().zip(b).map(|(c, b)| (c - b).exp()).collect(),
                    RatioMode::Sequence => vec![
                        ((cur.iter().sum::<f64>() - b.iter().sum::<f64>()) / l).exp(),
                    ],
                };
                rhos.iter().any(|r| {
                    (r - (1.0 - cfg.clip_low)).abs() < 1e-4 || (r - (1.0 + cfg.clip_high)).abs() < 1e-4
                })
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>()) {
            let (cur, target, batch, cfg) = random_case(seed);
            prop_assume!(!near_kink(&cur, &batch, &cfg));
            let out = surrogate_gradient(&cur, &batch, Some(&target), &cfg).unwrap();
            let fd = central_difference(&cur, &batch, Some(&target), &cfg, 1e-6);
            let err = rel_err(&out.gradient, &fd);
            prop_assert!(err <= 1e-5, "relative error {}", err);
        }
    }
}
