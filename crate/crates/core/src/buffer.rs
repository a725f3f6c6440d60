//! FIFO replay stores for difficult and high-quality groups.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::ResponseGroup;
use crate::policy::PromptId;

/// High-quality entries stay eligible for this many steps after insertion.
pub const DEFAULT_RECENCY_WINDOW: u64 = 3;

/// Upper bound on prompts re-evaluated per re-evaluation step.
pub const DEFAULT_MAX_REEVAL_PROMPTS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Bad,
    High,
}

/// One stored group: prompt id, responses, rewards and behavior
/// log-probabilities, tagged with the generating and inserting steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub prompt: PromptId,
    pub group: ResponseGroup,
    pub mean_at_insert: f64,
    pub insert_step: u64,
    /// Admission interval `[low, high]` in force at insertion.
    pub band: (f64, f64),
}

impl BufferEntry {
    pub fn new(group: ResponseGroup, insert_step: u64, band: (f64, f64)) -> Self {
        Self {
            prompt: group.prompt,
            mean_at_insert: group.mean(),
            group,
            insert_step,
            band,
        }
    }

    pub fn behavior_step(&self) -> u64 {
        self.group.behavior_step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FifoBuffer {
    kind: BufferKind,
    capacity: usize,
    entries: VecDeque<BufferEntry>,
}

/// Buffer capacities `(bad, high)`: both equal the training batch size.
pub fn capacity_defaults(batch_size: usize) -> (usize, usize) {
    (batch_size, batch_size)
}

impl FifoBuffer {
    pub fn new(kind: BufferKind, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            kind,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn kind(&self) -> BufferKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn contains(&self, prompt: PromptId) -> bool {
        self.entries.iter().any(|e| e.prompt == prompt)
    }

    /// Appends an entry; a stale entry for the same prompt is replaced and the
    /// oldest entries are evicted beyond capacity.
    pub fn push(&mut self, entry: BufferEntry) {
        self.entries.retain(|e| e.prompt != entry.prompt);
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn remove_prompts(&mut self, prompts: &[PromptId]) {
        self.entries.retain(|e| !prompts.contains(&e.prompt));
    }

    /// Drops entries inserted more than `window` steps before `current_step`.
    pub fn purge_stale(&mut self, current_step: u64, window: u64) -> usize {
        let before = self.entries.len();
        self.entries
            .retain(|e| current_step.saturating_sub(e.insert_step) <= window);
        before - self.entries.len()
    }

    /// Writes one JSON object per entry.
    pub fn dump_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Stores `group` in the difficult buffer iff `mu <= c1`.
pub fn admit_bad(buffer: &mut FifoBuffer, group: &ResponseGroup, c1: f64, step: u64) -> bool {
    if group.mean() <= c1 {
        buffer.push(BufferEntry::new(group.clone(), step, (0.0, c1)));
        true
    } else {
        false
    }
}

/// Stores `group` in the high-quality buffer iff `c2 <= mu <= c3`.
pub fn admit_high(
    buffer: &mut FifoBuffer,
    group: &ResponseGroup,
    c2: f64,
    c3: f64,
    current_step: u64,
) -> Result<bool> {
    if c2 > c3 {
        return Err(Error::Config(format!("c2 = {c2} exceeds c3 = {c3}")));
    }
    let mu = group.mean();
    if c2 <= mu && mu <= c3 {
        buffer.push(BufferEntry::new(group.clone(), current_step, (c2, c3)));
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Entries usable for replay at `current_step`: inserted during one of the
/// `window` preceding steps. Older entries are purged first.
pub fn eligible_high(buffer: &mut FifoBuffer, current_step: u64, window: u64) -> Vec<BufferEntry> {
    buffer.purge_stale(current_step, window);
    buffer
        .entries
        .iter()
        .filter(|e| e.insert_step < current_step)
        .cloned()
        .collect()
}

/// Up to `max_prompts` oldest difficult entries, left in place.
pub fn drain_for_reeval(buffer: &FifoBuffer, max_prompts: usize) -> Vec<BufferEntry> {
    buffer.entries.iter().take(max_prompts).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::compute_group_stats;
    use crate::policy::ResponseSeq;
    use proptest::prelude::*;

    pub(crate) fn group(prompt: usize, successes: usize, g: usize) -> ResponseGroup {
        let rewards: Vec<u8> = (0..g).map(|i| u8::from(i < successes)).collect();
        ResponseGroup {
            prompt: PromptId(prompt),
            responses: vec![ResponseSeq::new(vec![0]); g],
            behavior_token_log_probs: vec![vec![-1.0]; g],
            behavior_step: 0,
            stats: compute_group_stats(&rewards, 1e-4).unwrap(),
            rewards,
        }
    }

    #[test]
    fn bad_admission() {
        let mut b = FifoBuffer::new(BufferKind::Bad, 4).unwrap();
        assert!(admit_bad(&mut b, &group(0, 0, 8), 0.125, 0));
        assert!(!admit_bad(&mut b, &group(1, 2, 8), 0.125, 0));
        assert!(admit_bad(&mut b, &group(2, 1, 8), 0.125, 0));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn high_admission() {
        let mut b = FifoBuffer::new(BufferKind::High, 4).unwrap();
        assert!(admit_high(&mut b, &group(0, 3, 8), 0.25, 0.5, 0).unwrap());
        assert!(!admit_high(&mut b, &group(1, 5, 8), 0.25, 0.5, 0).unwrap());
        assert!(admit_high(&mut b, &group(1, 5, 8), 0.6, 0.5, 0).is_err());
    }

    #[test]
    fn recency_window() {
        let mut b = FifoBuffer::new(BufferKind::High, 4).unwrap();
        admit_high(&mut b, &group(0, 3, 8), 0.25, 0.5, 10).unwrap();
        assert!(eligible_high(&mut b, 10, 3).is_empty());
        for step in 11..=13 {
            assert_eq!(eligible_high(&mut b, step, 3).len(), 1);
        }
        assert!(eligible_high(&mut b, 14, 3).is_empty());
        assert!(b.is_empty());
    }

    #[test]
    fn capacity_and_eviction() {
        assert_eq!(capacity_defaults(256), (256, 256));
        assert_eq!(capacity_defaults(8), (8, 8));
        let mut b = FifoBuffer::new(BufferKind::Bad, 2).unwrap();
        for p in 0..3 {
            admit_bad(&mut b, &group(p, 0, 8), 0.125, 0);
        }
        let ids: Vec<_> = b.entries().map(|e| e.prompt.0).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn duplicate_prompt_replaces_stale_entry() {
        let mut b = FifoBuffer::new(BufferKind::Bad, 4).unwrap();
        admit_bad(&mut b, &group(0, 0, 8), 0.125, 1);
        admit_bad(&mut b, &group(1, 0, 8), 0.125, 2);
        admit_bad(&mut b, &group(0, 1, 8), 0.125, 3);
        let ids: Vec<_> = b.entries().map(|e| (e.prompt.0, e.insert_step)).collect();
        assert_eq!(ids, vec![(1, 2), (0, 3)]);
    }

    #[test]
    fn drain_order() {
        let mut b = FifoBuffer::new(BufferKind::Bad, 256).unwrap();
        assert!(drain_for_reeval(&b, 128).is_empty());
        for p in 0..5 {
            admit_bad(&mut b, &group(p, 0, 8), 0.125, 0);
        }
        let d: Vec<_> = drain_for_reeval(&b, 128).iter().map(|e| e.prompt.0).collect();
        assert_eq!(d, vec![0, 1, 2, 3, 4]);
        for p in 5..200 {
            admit_bad(&mut b, &group(p, 0, 8), 0.125, 0);
        }
        let d = drain_for_reeval(&b, 128);
        assert_eq!(d.len(), 128);
        assert!(d.iter().enumerate().all(|(i, e)| e.prompt.0 == i));
        assert_eq!(b.len(), 200);
    }

    #[test]
    fn jsonl_dump_has_one_line_per_entry() {
        let mut b = FifoBuffer::new(BufferKind::Bad, 4).unwrap();
        admit_bad(&mut b, &group(0, 0, 4), 0.125, 0);
        admit_bad(&mut b, &group(1, 0, 4), 0.125, 0);
        let mut out = Vec::new();
        b.dump_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: BufferEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.prompt, PromptId(0));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Bad { prompt: usize, successes: usize },
        High { prompt: usize, successes: usize },
        Step,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..12, 0usize..=8).prop_map(|(prompt, successes)| Op::Bad { prompt, successes }),
            (0usize..12, 0usize..=8).prop_map(|(prompt, successes)| Op::High { prompt, successes }),
            Just(Op::Step),
        ]
    }

    proptest! {
        #[test]
        fn buffer_laws(ops in prop::collection::vec(op(), 0..200), cap in 1usize..8) {
            let (c1, c2, c3) = (0.125, 0.25, 0.5);
            let mut bad = FifoBuffer::new(BufferKind::Bad, cap).unwrap();
            let mut high = FifoBuffer::new(BufferKind::High, cap).unwrap();
            let mut step = 0u64;
            let mut seq = 0u64;
            // insertion sequences, keyed by a running counter stored in behavior_step
            let mut bad_log: Vec<(usize, u64)> = Vec::new();
            for op in ops {
                match op {
                    Op::Bad { prompt, successes } => {
                        let mut g = group(prompt, successes, 8);
                        g.behavior_step = seq;
                        if admit_bad(&mut bad, &g, c1, step) {
                            bad_log.push((prompt, seq));
                        }
                        seq += 1;
                    }
                    Op::High { prompt, successes } => {
                        admit_high(&mut high, &group(prompt, successes, 8), c2, c3, step).unwrap();
                    }
                    Op::Step => {
                        step += 1;
                        let eligible = eligible_high(&mut high, step, 3);
                        for e in &eligible {
                            prop_assert!(e.insert_step < step && step - e.insert_step <= 3);
                        }
                    }
                }
                prop_assert!(bad.len() <= cap && high.len() <= cap);
                for e in bad.entries() {
                    prop_assert!(e.mean_at_insert <= c1);
                }
                for e in high.entries() {
                    prop_assert!(c2 <= e.mean_at_insert && e.mean_at_insert <= c3);
                }
                // FIFO suffix law modulo per-prompt replacement: keep only the
                // latest insertion of each prompt, then the buffer is a suffix.
                let latest: Vec<(usize, u64)> = bad_log
                    .iter()
                    .enumerate()
                    .filter(|(i, (p, _))| !bad_log[i + 1..].iter().any(|(q, _)| q == p))
                    .map(|(_, x)| *x)
                    .collect();
                let current: Vec<(usize, u64)> =
                    bad.entries().map(|e| (e.prompt.0, e.group.behavior_step)).collect();
                prop_assert!(latest.ends_with(&current));
                prop_assert_eq!(current.len(), latest.len().min(cap));
            }
        }
    }
}
