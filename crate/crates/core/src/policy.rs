//! Tabular autoregressive categorical policy.
//!
//! Every prompt owns an `L x V` table of logits. Tokens at different positions
//! are drawn independently, so sequence probabilities factorize across
//! positions and KL, entropy and total variation can be computed exactly.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest response space `V^L` that may be enumerated.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const SNAPSHOT_FORMAT: &str = "bapo-policy";
const SNAPSHOT_VERSION: u32 = 1;

/// Identifier of a prompt; doubles as its row index in [`PolicyParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub usize);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A fixed-length token sequence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseSeq(Vec<u32>);

impl ResponseSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks length and token range against a vocabulary and length.
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.0.len() != max_len {
            return Err(Error::InvalidResponse(format!(
                "length {} != {}",
                self.0.len(),
                max_len
            )));
        }
        if let Some(&t) = self.0.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::InvalidResponse(format!(
                "token {t} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }

    /// Mixed-radix index in `0..V^L`, first token most significant.
    pub fn index(&self, vocab_size: usize) -> u64 {
        self.0
            .iter()
            .fold(0u64, |acc, &t| acc * vocab_size as u64 + t as u64)
    }

    pub fn from_index(mut index: u64, vocab_size: usize, max_len: usize) -> Self {
        let mut tokens = vec![0u32; max_len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % vocab_size as u64) as u32;
            index /= vocab_size as u64;
        }
        Self(tokens)
    }
}

/// Number of distinct responses `V^L`, or `None` on overflow.
pub fn response_space_size(vocab_size: usize, max_len: usize) -> Option<u128> {
    (0..max_len).try_fold(1u128, |acc, _| acc.checked_mul(vocab_size as u128))
}

pub(crate) fn enumerable_size(vocab_size: usize, max_len: usize) -> Result<u64> {
    match response_space_size(vocab_size, max_len) {
        Some(n) if n <= ENUMERATION_LIMIT => Ok(n as u64),
        Some(n) => Err(Error::ResponseSpaceTooLarge {
            size: n,
            limit: ENUMERATION_LIMIT,
        }),
        None => Err(Error::ResponseSpaceTooLarge {
            size: u128::MAX,
            limit: ENUMERATION_LIMIT,
        }),
    }
}

/// Immutable snapshot of per-prompt, per-position logits.
///
/// Log-softmax rows are cached at construction; an update always produces a
/// new snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    num_prompts: usize,
    vocab_size: usize,
    max_len: usize,
    step_tag: u64,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicySnapshot {
    format: String,
    version: u32,
    num_prompts: usize,
    vocab_size: usize,
    max_len: usize,
    step_tag: u64,
    logits: Vec<f64>,
}

fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum.ln();
    for (o, z) in out.iter_mut().zip(row) {
        *o = z - log_norm;
    }
}

impl PolicyParams {
    /// All-zero logits: the uniform policy.
    pub fn uniform(num_prompts: usize, vocab_size: usize, max_len: usize) -> Self {
        let n = num_prompts * vocab_size * max_len;
        Self::from_logits(num_prompts, vocab_size, max_len, vec![0.0; n], 0)
            .expect("uniform logits are always valid")
    }

    pub fn from_logits(
        num_prompts: usize,
        vocab_size: usize,
        max_len: usize,
        logits: Vec<f64>,
        step_tag: u64,
    ) -> Result<Self> {
        if vocab_size == 0 || max_len == 0 {
            return Err(Error::ShapeMismatch(
                "vocabulary size and length must be positive".into(),
            ));
        }
        if logits.len() != num_prompts * vocab_size * max_len {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits, got {}",
                num_prompts * vocab_size * max_len,
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::ShapeMismatch("logits must be finite".into()));
        }
        let mut log_probs = vec![0.0; logits.len()];
        for (row, out) in logits
            .chunks_exact(vocab_size)
            .zip(log_probs.chunks_exact_mut(vocab_size))
        {
            log_softmax_into(row, out);
        }
        Ok(Self {
            num_prompts,
            vocab_size,
            max_len,
            step_tag,
            logits,
            log_probs,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn step_tag(&self) -> u64 {
        self.step_tag
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn with_step_tag(mut self, step_tag: u64) -> Self {
        self.step_tag = step_tag;
        self
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.num_prompts == other.num_prompts
            && self.vocab_size == other.vocab_size
            && self.max_len == other.max_len
    }

    fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if prompt.0 >= self.num_prompts {
            return Err(Error::UnknownPrompt {
                id: prompt,
                count: self.num_prompts,
            });
        }
        Ok(())
    }

    pub(crate) fn row_offset(&self, prompt: PromptId, position: usize) -> usize {
        (prompt.0 * self.max_len + position) * self.vocab_size
    }

    /// Log-softmax of one `(prompt, position)` row.
    pub fn row_log_probs(&self, prompt: PromptId, position: usize) -> Result<&[f64]> {
        self.check_prompt(prompt)?;
        if position >= self.max_len {
            return Err(Error::InvalidResponse(format!(
                "position {position} beyond length {}",
                self.max_len
            )));
        }
        let off = self.row_offset(prompt, position);
        Ok(&self.log_probs[off..off + self.vocab_size])
    }

    pub fn row_probs(&self, prompt: PromptId, position: usize) -> Result<Vec<f64>> {
        Ok(self
            .row_log_probs(prompt, position)?
            .iter()
            .map(|lp| lp.exp())
            .collect())
    }

    /// Draws one response, token by token, from the per-position softmax.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        prompt: PromptId,
        rng: &mut R,
    ) -> Result<ResponseSeq> {
        self.check_prompt(prompt)?;
        let mut tokens = Vec::with_capacity(self.max_len);
        for pos in 0..self.max_len {
            let off = self.row_offset(prompt, pos);
            let row = &self.log_probs[off..off + self.vocab_size];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_support = 0;
            for (k, lp) in row.iter().enumerate() {
                let p = lp.exp();
                if p > 0.0 {
                    last_support = k;
                }
                acc += p;
                if u < acc && p > 0.0 {
                    chosen = Some(k);
                    break;
                }
            }
            // Rounding can leave `acc` a hair below 1.
            tokens.push(chosen.unwrap_or(last_support) as u32);
        }
        Ok(ResponseSeq(tokens))
    }

    /// Per-position log-probabilities of `y`.
    pub fn token_log_probs(&self, prompt: PromptId, y: &ResponseSeq) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        y.validate(self.vocab_size, self.max_len)?;
        Ok(y.tokens()
            .iter()
            .enumerate()
            .map(|(pos, &tok)| self.log_probs[self.row_offset(prompt, pos) + tok as usize])
            .collect())
    }

    /// `log pi(y | x)`, summed over positions.
    pub fn log_prob(&self, prompt: PromptId, y: &ResponseSeq) -> Result<f64> {
        Ok(self.token_log_probs(prompt, y)?.iter().sum())
    }

    /// Probabilities of every response in mixed-radix index order.
    pub fn sequence_probs(&self, prompt: PromptId) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let n = enumerable_size(self.vocab_size, self.max_len)? as usize;
        let mut probs = vec![1.0f64];
        probs.reserve(n);
        for pos in 0..self.max_len {
            let row = self.row_probs(prompt, pos)?;
            probs = probs
                .iter()
                .flat_map(|&p| row.iter().map(move |&q| p * q))
                .collect();
        }
        Ok(probs)
    }

    /// Shannon entropy of the full response distribution for `prompt`.
    pub fn entropy(&self, prompt: PromptId) -> Result<f64> {
        self.check_prompt(prompt)?;
        let mut h = 0.0;
        for pos in 0..self.max_len {
            let off = self.row_offset(prompt, pos);
            for lp in &self.log_probs[off..off + self.vocab_size] {
                let p = lp.exp();
                if p > 0.0 {
                    h -= p * lp;
                }
            }
        }
        Ok(h)
    }

    /// Gradient-ascent step `theta + lr * g`; the result is a new snapshot
    /// tagged one step later.
    pub fn apply_update(&self, gradient: &[f64], learning_rate: f64) -> Result<PolicyParams> {
        if gradient.len() != self.logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} entries, policy has {}",
                gradient.len(),
                self.logits.len()
            )));
        }
        if !learning_rate.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let logits = self
            .logits
            .iter()
            .zip(gradient)
            .map(|(z, g)| z + learning_rate * g)
            .collect();
        PolicyParams::from_logits(
            self.num_prompts,
            self.vocab_size,
            self.max_len,
            logits,
            self.step_tag + 1,
        )
        .map_err(|_| Error::NonFiniteGradient)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        let snap = PolicySnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            num_prompts: self.num_prompts,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            step_tag: self.step_tag,
            logits: self.logits.clone(),
        };
        serde_json::to_writer(writer, &snap)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let snap: PolicySnapshot = serde_json::from_reader(reader)?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        PolicyParams::from_logits(
            snap.num_prompts,
            snap.vocab_size,
            snap.max_len,
            snap.logits,
            snap.step_tag,
        )
    }
}

/// Sequence-level importance ratio `pi(y|x) / behavior(y|x)`.
pub fn ratio(
    current: &PolicyParams,
    behavior_log_prob: f64,
    prompt: PromptId,
    y: &ResponseSeq,
) -> Result<f64> {
    if !behavior_log_prob.is_finite() {
        return Err(Error::RatioOverflow(behavior_log_prob));
    }
    Ok((current.log_prob(prompt, y)? - behavior_log_prob).exp())
}

/// Per-token importance ratios against stored behavior log-probabilities.
pub fn token_ratios(
    current: &PolicyParams,
    behavior_token_log_probs: &[f64],
    prompt: PromptId,
    y: &ResponseSeq,
) -> Result<Vec<f64>> {
    if let Some(&bad) = behavior_token_log_probs.iter().find(|lp| !lp.is_finite()) {
        return Err(Error::RatioOverflow(bad));
    }
    let current_lps = current.token_log_probs(prompt, y)?;
    if current_lps.len() != behavior_token_log_probs.len() {
        return Err(Error::ShapeMismatch(
            "behavior log-probabilities do not match response length".into(),
        ));
    }
    Ok(current_lps
        .iter()
        .zip(behavior_token_log_probs)
        .map(|(c, b)| (c - b).exp())
        .collect())
}

fn check_pair(p: &PolicyParams, q: &PolicyParams) -> Result<()> {
    if p.vocab_size != q.vocab_size || p.max_len != q.max_len {
        return Err(Error::ShapeMismatch(
            "policies disagree on vocabulary size or length".into(),
        ));
    }
    Ok(())
}

/// `KL(p || q)` over the whole response space; positions are independent so
/// the divergence is the sum of per-position divergences.
pub fn exact_kl(p: &PolicyParams, q: &PolicyParams, prompt: PromptId) -> Result<f64> {
    check_pair(p, q)?;
    let mut kl = 0.0;
    for pos in 0..p.max_len {
        let lp = p.row_log_probs(prompt, pos)?;
        let lq = q.row_log_probs(prompt, pos)?;
        for (a, b) in lp.iter().zip(lq) {
            let pa = a.exp();
            if pa > 0.0 {
                kl += pa * (a - b);
            }
        }
    }
    Ok(kl.max(0.0))
}

/// Total variation `1/2 sum_y |p(y|x) - q(y|x)|` by enumeration.
pub fn exact_tv(p: &PolicyParams, q: &PolicyParams, prompt: PromptId) -> Result<f64> {
    check_pair(p, q)?;
    let a = p.sequence_probs(prompt)?;
    let b = q.sequence_probs(prompt)?;
    Ok(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}
