use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use bapo_core::metrics::{mean_std, BINS_SCHEMA};
use bapo_core::{run, EvalSnapshot, MigrationMatrix, RunOutput, TheoryReport, TrainerConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_hash, load_config, sha256_hex, universe_bytes, LoadedConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::output::{
    ensure_dir, write_csv, write_json, write_run, Manifest, RunSummary, Versions, MANIFEST_SCHEMA,
};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "BAPO_OUT_DIR";
pub const COMPARE_SCHEMA: &str = "bapo-compare/1";
pub const REWARD_CSV_SCHEMA: &str = "bapo-reward-csv/1";
pub const UNLOCKED_CSV_SCHEMA: &str = "bapo-unlocked-csv/1";
pub const COMPARE_LEDGER_CSV_SCHEMA: &str = "bapo-compare-ledger-csv/1";
pub const MIGRATION_SCHEMA: &str = "bapo-migration/1";
pub const DEFAULT_ALARM: f64 = 0.1;
const EXACT_DROP_TOLERANCE: f64 = 1e-9;

/// `explicit`, else `$BAPO_OUT_DIR/<name>`, else `runs/<name>`.
pub fn output_dir(explicit: Option<&Path>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default_name),
    }
}

fn load_or_default(path: Option<&Path>) -> CliResult<LoadedConfig> {
    path.map_or_else(|| Ok(LoadedConfig::defaults()), load_config)
}

fn run_one(trainer: &TrainerConfig, universe: &bapo_core::PromptUniverse, dir: &Path) -> CliResult<RunOutput> {
    match run(trainer, universe) {
        Ok(r) => Ok(r),
        Err(bapo_core::Error::NonFiniteLoss { step, dump }) => {
            ensure_dir(dir)?;
            write_json(&dir.join("failure_dump.json"), &dump)?;
            Err(bapo_core::Error::NonFiniteLoss { step, dump }.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub overrides: Overrides,
}

/// One run per seed. A single seed writes into `out`; several seeds write
/// into `out/seed-<s>`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<Vec<RunSummary>> {
    let loaded = load_or_default(args.config.as_deref())?;
    let universe = loaded.universe()?;
    let ubytes = universe_bytes(&universe)?;
    let seeds = loaded.seeds(args.seeds.as_deref());
    let mut base = loaded.config.trainer.clone();
    args.overrides.apply(&mut base);
    base.plan()?;

    seeds
        .par_iter()
        .map(|&seed| {
            let trainer = TrainerConfig { seed, ..base.clone() };
            let dir = if seeds.len() == 1 {
                args.out.clone()
            } else {
                args.out.join(format!("seed-{seed}"))
            };
            let out = run_one(&trainer, &universe, &dir)?;
            let hash = config_hash(&trainer, &universe)?;
            write_run(&dir, "train", &out, &ubytes, &hash)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct CompareArgs {
    pub configs: Vec<PathBuf>,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub overrides: Overrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub algorithm: String,
    pub config_hash: String,
    pub unlocked_mean: Option<f64>,
    pub unlocked_std: Option<f64>,
    pub runs: Vec<RunSummary>,
}

impl LabelSummary {
    pub fn mean_training_responses(&self) -> f64 {
        self.runs.iter().map(|r| r.ledger.training_responses as f64).sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub schema: String,
    pub seeds: Vec<u64>,
    pub universe_hash: String,
    pub labels: Vec<LabelSummary>,
}

impl CompareSummary {
    pub fn label(&self, name: &str) -> Option<&LabelSummary> {
        self.labels.iter().find(|l| l.label == name)
    }
}

struct Job {
    label: usize,
    seed: u64,
}

struct JobResult {
    summary: RunSummary,
    rewards: Vec<f64>,
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<CompareSummary> {
    if args.configs.len() < 2 {
        return Err(CliError::Refused(format!(
            "compare needs at least two configs, got {}",
            args.configs.len()
        )));
    }
    let loaded = args
        .configs
        .iter()
        .map(|p| load_config(p))
        .collect::<CliResult<Vec<_>>>()?;

    let labels: Vec<String> = loaded.iter().map(LoadedConfig::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(CliError::Refused(format!("duplicate config name {l:?}")));
        }
    }

    let universe = loaded[0].universe()?;
    let ubytes = universe_bytes(&universe)?;
    for l in &loaded[1..] {
        if universe_bytes(&l.universe()?)? != ubytes {
            return Err(CliError::Refused(format!(
                "{} and {} describe different universes",
                loaded[0].path.display(),
                l.path.display()
            )));
        }
    }
    let seeds = loaded[0].seeds(args.seeds.as_deref());
    for l in &loaded[1..] {
        if l.seeds(args.seeds.as_deref()) != seeds {
            return Err(CliError::Refused(format!(
                "{} uses a different seed set",
                l.path.display()
            )));
        }
    }

    let trainers = loaded
        .iter()
        .map(|l| {
            let mut t = l.config.trainer.clone();
            args.overrides.apply(&mut t);
            t.plan()?;
            Ok(t)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let jobs: Vec<Job> = (0..loaded.len())
        .flat_map(|label| seeds.iter().map(move |&seed| Job { label, seed }))
        .collect();
    let results = jobs
        .par_iter()
        .map(|job| {
            let trainer = TrainerConfig {
                seed: job.seed,
                ..trainers[job.label].clone()
            };
            let dir = args.out.join(&labels[job.label]).join(format!("seed-{}", job.seed));
            let out = run_one(&trainer, &universe, &dir)?;
            let hash = config_hash(&trainer, &universe)?;
            let summary = write_run(&dir, "compare", &out, &ubytes, &hash)?;
            Ok(JobResult {
                summary,
                rewards: out.records.iter().map(|r| r.mean_reward).collect(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let per_label = |i: usize| -> Vec<&JobResult> {
        jobs.iter()
            .zip(&results)
            .filter(|(j, _)| j.label == i)
            .map(|(_, r)| r)
            .collect()
    };

    let mut reward_rows = Vec::new();
    let mut unlocked_rows = Vec::new();
    let mut ledger_rows = Vec::new();
    let mut summaries = Vec::new();
    let fmt_opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for (i, label) in labels.iter().enumerate() {
        let rs = per_label(i);
        let steps = rs.iter().map(|r| r.rewards.len()).min().unwrap_or(0);
        for t in 0..steps {
            let xs: Vec<f64> = rs.iter().map(|r| r.rewards[t]).collect();
            let (m, s) = mean_std(&xs);
            reward_rows.push(vec![label.clone(), t.to_string(), m.to_string(), s.to_string(), xs.len().to_string()]);
        }
        let unlocked: Vec<f64> = rs.iter().filter_map(|r| r.summary.unlocked_fraction).collect();
        let (um, us) = if unlocked.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&unlocked);
            (Some(m), Some(s))
        };
        let alg = trainers[i].algorithm.name().to_string();
        unlocked_rows.push(vec![
            label.clone(),
            alg.clone(),
            unlocked.len().to_string(),
            fmt_opt(um),
            fmt_opt(us),
        ]);
        for r in &rs {
            let s = &r.summary;
            let l = &s.ledger;
            ledger_rows.push(vec![
                label.clone(),
                s.seed.to_string(),
                l.training_groups.to_string(),
                l.training_responses.to_string(),
                l.fresh_responses.to_string(),
                l.reevaluation_responses.to_string(),
                l.dapo_resample_responses.to_string(),
                l.evaluation_responses.to_string(),
                fmt_opt(s.early_zero_variance_fraction),
            ]);
        }
        summaries.push(LabelSummary {
            label: label.clone(),
            algorithm: alg,
            config_hash: config_hash(&trainers[i], &universe)?,
            unlocked_mean: um,
            unlocked_std: us,
            runs: rs.iter().map(|r| r.summary.clone()).collect(),
        });
    }

    ensure_dir(&args.out)?;
    write_csv(
        &args.out.join("reward.csv"),
        REWARD_CSV_SCHEMA,
        &["label", "step", "mean_reward_mean", "mean_reward_std", "seeds"],
        &reward_rows,
    )?;
    write_csv(
        &args.out.join("unlocked.csv"),
        UNLOCKED_CSV_SCHEMA,
        &["label", "algorithm", "seeds", "unlocked_mean", "unlocked_std"],
        &unlocked_rows,
    )?;
    write_csv(
        &args.out.join("ledger.csv"),
        COMPARE_LEDGER_CSV_SCHEMA,
        &[
            "label",
            "seed",
            "training_groups",
            "training_responses",
            "fresh_responses",
            "reevaluation_responses",
            "dapo_resample_responses",
            "evaluation_responses",
            "early_zero_variance_fraction",
        ],
        &ledger_rows,
    )?;
    let summary = CompareSummary {
        schema: COMPARE_SCHEMA.into(),
        seeds: seeds.clone(),
        universe_hash: sha256_hex(&ubytes),
        labels: summaries,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    let hashes: BTreeMap<&str, &str> = summary
        .labels
        .iter()
        .map(|l| (l.label.as_str(), l.config_hash.as_str()))
        .collect();
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "schema": MANIFEST_SCHEMA,
            "command": "compare",
            "seeds": seeds,
            "config_hashes": hashes,
            "universe_hash": summary.universe_hash,
            "versions": Versions::current(),
            "files": ["reward.csv", "unlocked.csv", "ledger.csv", "summary.json", "manifest.json"],
        }),
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationEntry {
    pub query_step: u64,
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    /// Lower-triangle mass of the sampled-bin matrix.
    pub regression_fraction: f64,
    /// Share of tracked prompts whose expected reward decreased.
    pub exact_regression_fraction: f64,
    pub unlocked_fraction: Option<f64>,
    pub alarm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub schema: String,
    pub reference_step: u64,
    pub tracked: usize,
    pub alarm_threshold: f64,
    pub matrices: Vec<MigrationEntry>,
}

#[derive(Clone, Debug)]
pub struct MigrationArgs {
    pub run_dir: PathBuf,
    /// Empty means every recorded step.
    pub steps: Vec<u64>,
    pub out: Option<PathBuf>,
    pub alarm: f64,
}

#[derive(Deserialize)]
struct BinsHeader {
    schema: String,
    group_size: usize,
}

pub fn read_bins(path: &Path) -> CliResult<(usize, Vec<EvalSnapshot>)> {
    let file = fs::File::open(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |m: String| CliError::Invalid(format!("{}: {m}", path.display()));
    let header: BinsHeader = match lines.next() {
        Some(Ok(l)) => serde_json::from_str(&l).map_err(|e| bad(e.to_string()))?,
        _ => return Err(bad("empty file".into())),
    };
    if header.schema != BINS_SCHEMA {
        return Err(bad(format!("unsupported schema {}", header.schema)));
    }
    let snaps = lines
        .map(|l| {
            let l = l.map_err(|e| bad(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| bad(e.to_string()))
        })
        .collect::<CliResult<Vec<EvalSnapshot>>>()?;
    Ok((header.group_size, snaps))
}

pub fn cmd_migration(args: &MigrationArgs) -> CliResult<MigrationReport> {
    let (g, snaps) = read_bins(&args.run_dir.join("bins.jsonl"))?;
    let reference = snaps
        .first()
        .ok_or_else(|| CliError::Refused("run has no recorded evaluations".into()))?;
    let available: Vec<u64> = snaps.iter().map(|s| s.step).collect();
    let wanted = if args.steps.is_empty() { available.clone() } else { args.steps.clone() };
    let matrices = wanted
        .iter()
        .map(|&step| {
            let q = snaps.iter().find(|s| s.step == step).ok_or_else(|| {
                CliError::Refused(format!("step {step} not recorded; available steps: {available:?}"))
            })?;
            let m = MigrationMatrix::between(reference.step, &reference.assignments, step, &q.assignments, g)?;
            let regression = m.regression_fraction();
            let dropped = reference
                .exact_rewards
                .iter()
                .zip(&q.exact_rewards)
                .filter(|(a, b)| **b < **a - EXACT_DROP_TOLERANCE)
                .count();
            Ok(MigrationEntry {
                query_step: step,
                row_sums: m.row_sums(),
                regression_fraction: regression,
                exact_regression_fraction: dropped as f64 / reference.exact_rewards.len().max(1) as f64,
                unlocked_fraction: m.unlocked_fraction(),
                alarm: regression > args.alarm,
                counts: m.counts,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = MigrationReport {
        schema: MIGRATION_SCHEMA.into(),
        reference_step: reference.step,
        tracked: reference.assignments.len(),
        alarm_threshold: args.alarm,
        matrices,
    };
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    ensure_dir(&out)?;
    write_json(&out.join("migration.json"), &report)?;
    Ok(report)
}

/// Writes `theory.json` and fails iff any check failed.
pub fn cmd_verify_theory(config: Option<&Path>, out: &Path) -> CliResult<TheoryReport> {
    let loaded = load_or_default(config)?;
    let report = bapo_core::verify_theory(&loaded.config.theory)?;
    ensure_dir(out)?;
    write_json(&out.join("theory.json"), &report)?;
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::TheoryFailed(report.failures.join("; ")))
    }
}

pub fn cmd_dump_universe(config: Option<&Path>, out: &Path) -> CliResult<bapo_core::PromptUniverse> {
    let loaded = load_or_default(config)?;
    let universe = loaded.universe()?;
    ensure_dir(out)?;
    let path = out.join("universe.json");
    fs::write(&path, universe_bytes(&universe)?).map_err(crate::output::io_err(&path))?;
    Ok(universe)
}

/// Manifest of a single run directory.
pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|_| CliError::MissingInput(p.clone()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(e.to_string()))
}
