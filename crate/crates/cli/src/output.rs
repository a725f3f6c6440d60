//! File writers. Every file starts with a line naming its schema.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bapo_core::metrics::{AUDIT_SCHEMA, BINS_SCHEMA, BUFFER_SCHEMA, METRICS_SCHEMA};
use bapo_core::RunOutput;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "bapo-manifest/1";
pub const SUMMARY_SCHEMA: &str = "bapo-summary/1";
pub const LEDGER_CSV_SCHEMA: &str = "bapo-ledger-csv/1";

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn json_line<W: Write, T: Serialize + ?Sized>(w: &mut W, value: &T, path: &Path) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value).map_err(bapo_core::Error::from)?;
    w.write_all(b"\n").map_err(io_err(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(bapo_core::Error::from)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Header object on the first line, then one row per line.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    header: &serde_json::Value,
    rows: impl IntoIterator<Item = &'a T>,
) -> CliResult<()> {
    let mut w = create(path)?;
    json_line(&mut w, header, path)?;
    for r in rows {
        json_line(&mut w, r, path)?;
    }
    w.flush().map_err(io_err(path))
}

/// `# <schema>` line, then a regular CSV table.
pub fn write_csv(path: &Path, schema: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = create(path)?;
    writeln!(w, "# {schema}").map_err(io_err(path))?;
    let mut c = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| CliError::Output {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    c.write_record(header).map_err(csv_err)?;
    for r in rows {
        c.write_record(r).map_err(csv_err)?;
    }
    c.flush().map_err(io_err(path))
}

/// Skips the `# schema` line and returns the CSV body as rows.
pub fn read_csv(path: &Path) -> CliResult<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let schema = first.trim_start_matches("# ").to_string();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let bad = |e: csv::Error| CliError::Invalid(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(bad)?;
    Ok((schema, header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Versions {
    pub bapo_core: String,
    pub bapo_cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            bapo_core: bapo_core::VERSION.into(),
            bapo_cli: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    pub universe_hash: String,
    pub versions: Versions,
    pub files: Vec<String>,
}

pub const RUN_FILES: [&str; 9] = [
    "metrics.jsonl",
    "bins.jsonl",
    "audit.jsonl",
    "buffers.jsonl",
    "ledger.csv",
    "policy.json",
    "universe.json",
    "summary.json",
    "manifest.json",
];

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub algorithm: String,
    pub seed: u64,
    pub steps: u64,
    pub final_mean_reward: Option<f64>,
    pub final_exact_mean_reward: Option<f64>,
    pub initial_bin0: usize,
    pub unlocked_fraction: Option<f64>,
    pub early_zero_variance_fraction: Option<f64>,
    pub ledger: bapo_core::LedgerReport,
}

/// Share of fresh groups with zero variance over the first tenth of the run
/// (at least one step).
pub fn early_zero_variance_fraction(run: &RunOutput) -> Option<f64> {
    let n = (run.records.len() / 10).max(1).min(run.records.len());
    let (zv, total) = run.records[..n]
        .iter()
        .fold((0, 0), |(z, t), r| (z + r.fresh_zero_variance, t + r.fresh_groups));
    (total > 0).then(|| zv as f64 / total as f64)
}

pub fn summarize(run: &RunOutput) -> RunSummary {
    RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        algorithm: run.config.algorithm.name().into(),
        seed: run.config.seed,
        steps: run.config.total_steps,
        final_mean_reward: run.records.last().map(|r| r.mean_reward),
        final_exact_mean_reward: run.evaluations.last().map(|e| e.exact_mean_reward),
        initial_bin0: run.evaluations.first().map_or(0, |e| e.bins[0]),
        unlocked_fraction: run.unlocked_fraction(),
        early_zero_variance_fraction: early_zero_variance_fraction(run),
        ledger: bapo_core::ledger_report(&run.ledger),
    }
}

#[derive(Serialize)]
struct BufferLine<'a> {
    buffer: bapo_core::BufferKind,
    #[serde(flatten)]
    entry: &'a bapo_core::BufferEntry,
}

/// Writes every per-run artifact into `dir`.
pub fn write_run(
    dir: &Path,
    command: &str,
    run: &RunOutput,
    universe_json: &[u8],
    config_hash: &str,
) -> CliResult<RunSummary> {
    ensure_dir(dir)?;
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let alg = run.config.algorithm.name();
    let seed = run.config.seed;

    write_jsonl(
        &p("metrics.jsonl"),
        &json!({"schema": METRICS_SCHEMA, "algorithm": alg, "seed": seed, "config_hash": config_hash}),
        &run.records,
    )?;
    write_jsonl(
        &p("bins.jsonl"),
        &json!({
            "schema": BINS_SCHEMA,
            "group_size": run.config.group_size,
            "tracked": run.tracked,
        }),
        &run.evaluations,
    )?;
    write_jsonl(&p("audit.jsonl"), &json!({"schema": AUDIT_SCHEMA}), &run.audits)?;
    let tag = |buffer| move |entry| BufferLine { buffer, entry };
    let lines: Vec<BufferLine> = run
        .bad_buffer
        .entries()
        .map(tag(bapo_core::BufferKind::Bad))
        .chain(run.high_buffer.entries().map(tag(bapo_core::BufferKind::High)))
        .collect();
    write_jsonl(
        &p("buffers.jsonl"),
        &json!({
            "schema": BUFFER_SCHEMA,
            "bad_capacity": run.bad_buffer.capacity(),
            "high_capacity": run.high_buffer.capacity(),
        }),
        &lines,
    )?;

    let rows: Vec<Vec<String>> = run
        .ledger
        .steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                s.fresh.to_string(),
                s.reevaluation.to_string(),
                s.dapo_resample.to_string(),
                s.evaluation.to_string(),
            ]
        })
        .collect();
    write_csv(
        &p("ledger.csv"),
        LEDGER_CSV_SCHEMA,
        &["step", "fresh_groups", "reevaluation_groups", "dapo_resample_groups", "evaluation_groups"],
        &rows,
    )?;

    let policy_path = p("policy.json");
    let mut w = create(&policy_path)?;
    run.final_policy.write_json(&mut w)?;
    w.flush().map_err(io_err(&policy_path))?;
    let upath = p("universe.json");
    fs::write(&upath, universe_json).map_err(io_err(&upath))?;

    let summary = summarize(run);
    write_json(&p("summary.json"), &summary)?;
    write_json(
        &p("manifest.json"),
        &Manifest {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            algorithm: alg.into(),
            seed,
            config_hash: config_hash.into(),
            universe_hash: crate::config::sha256_hex(universe_json),
            versions: Versions::current(),
            files: RUN_FILES.iter().map(|s| s.to_string()).collect(),
        },
    )?;
    Ok(summary)
}
