//! Accuracy bins, migration matrices and the derived summary fractions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "bapo-metrics/1";
pub const BINS_SCHEMA: &str = "bapo-bins/1";
pub const AUDIT_SCHEMA: &str = "bapo-audit/1";
pub const BUFFER_SCHEMA: &str = "bapo-buffer/1";

/// Count of prompts per accuracy bin `0..=G`.
pub fn bin_histogram(assignments: &[usize], group_size: usize) -> Result<Vec<usize>> {
    let mut bins = vec![0; group_size + 1];
    for &b in assignments {
        if b > group_size {
            return Err(Error::ShapeMismatch(format!("bin {b} beyond group size {group_size}")));
        }
        bins[b] += 1;
    }
    Ok(bins)
}

/// `(G+1) x (G+1)` counts; row is the reference bin, column the query bin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationMatrix {
    pub reference_step: u64,
    pub query_step: u64,
    pub counts: Vec<Vec<usize>>,
}

impl MigrationMatrix {
    pub fn between(
        reference_step: u64,
        reference: &[usize],
        query_step: u64,
        query: &[usize],
        group_size: usize,
    ) -> Result<Self> {
        if reference.len() != query.len() {
            return Err(Error::ShapeMismatch(
                "migration needs the same tracked prompts at both steps".into(),
            ));
        }
        let mut counts = vec![vec![0; group_size + 1]; group_size + 1];
        for (&r, &q) in reference.iter().zip(query) {
            if r > group_size || q > group_size {
                return Err(Error::ShapeMismatch("bin beyond group size".into()));
            }
            counts[r][q] += 1;
        }
        Ok(Self {
            reference_step,
            query_step,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Share of prompts that moved to a lower bin.
    pub fn regression_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let lower: usize = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, row)| row[..i].iter().sum::<usize>())
            .sum();
        lower as f64 / total as f64
    }

    /// Share of reference-bin-0 prompts found in bin 1 or higher.
    pub fn unlocked_fraction(&self) -> Option<f64> {
        let row = &self.counts[0];
        let n: usize = row.iter().sum();
        (n > 0).then(|| (n - row[0]) as f64 / n as f64)
    }
}

/// Fraction of prompts in bin 0 at the start that left bin 0 by the end.
pub fn unlocked_fraction(initial: &[usize], last: &[usize]) -> Option<f64> {
    let mut n = 0;
    let mut unlocked = 0;
    for (&a, &b) in initial.iter().zip(last) {
        if a == 0 {
            n += 1;
            unlocked += usize::from(b >= 1);
        }
    }
    (n > 0).then(|| unlocked as f64 / n as f64)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
