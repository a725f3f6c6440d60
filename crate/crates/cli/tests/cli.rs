use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bapo_cli::error::{EXIT_CONFIG, EXIT_MISSING_INPUT, EXIT_REFUSED, EXIT_THEORY_FAILED};
use bapo_cli::{Manifest, MigrationReport};
use bapo_core::{PolicyParams, PromptUniverse, TheoryReport, UniverseConfig};
use serde_json::Value;
use tempfile::TempDir;

const SMALL_UNIVERSE: &str = "[universe]\nnum_prompts = 48\nvocab_size = 3\nmax_len = 2\nseed = 5\n\
difficulty_histogram = [{ difficulty = 0.12, fraction = 0.5 }, { difficulty = 0.45, fraction = 0.5 }]\n";

fn bapo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bapo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("BAPO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn trainer_toml(alg: &str, steps: u64) -> String {
    format!(
        "{SMALL_UNIVERSE}[trainer]\nalgorithm = \"{alg}\"\ntotal_steps = {steps}\nbatch_size = 16\n\
rollout_batch = 16\ntrack_subset = 24\neval_every = 4\nlearning_rate = 5.0\n"
    )
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "grpo.toml", &trainer_toml("grpo", 12));
    let o = bapo(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");

    let metrics = jsonl(&run.join("metrics.jsonl"));
    assert_eq!(metrics[0]["schema"], "bapo-metrics/1");
    assert_eq!(metrics.len(), 13);
    for (t, r) in metrics[1..].iter().enumerate() {
        assert_eq!(r["step"], t as u64);
        assert_eq!(r["algorithm"], "grpo");
    }

    let bins = jsonl(&run.join("bins.jsonl"));
    assert_eq!(bins[0]["schema"], "bapo-bins/1");
    for b in &bins[1..] {
        let total: u64 = b["bins"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
        assert_eq!(total, 24);
    }
    assert_eq!(jsonl(&run.join("audit.jsonl"))[0]["schema"], "bapo-audit/1");
    assert_eq!(jsonl(&run.join("buffers.jsonl"))[0]["schema"], "bapo-buffer/1");
    let ledger = fs::read_to_string(run.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("# bapo-ledger-csv/1\nstep,"));
    // one row per training step plus the final evaluation at step 12
    let rows: Vec<&str> = ledger.lines().skip(2).collect();
    assert_eq!(rows.len(), 13);
    assert_eq!(rows[12], "12,0,0,0,24");

    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 0);
    assert_eq!(manifest.config_hash.len(), 64);
    assert_eq!(manifest.versions.bapo_core, bapo_core::VERSION);
    for f in &manifest.files {
        assert!(run.join(f).exists(), "{f}");
    }

    let pol = PolicyParams::read_json(fs::File::open(run.join("policy.json")).unwrap()).unwrap();
    assert_eq!(pol.num_prompts(), 48);
    let u = PromptUniverse::read_json(fs::File::open(run.join("universe.json")).unwrap()).unwrap();
    assert_eq!(u.len(), 48);
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "bapo.toml", &trainer_toml("bapo", 15));
    for out in ["a", "b"] {
        let o = bapo(&["train", "--config", "bapo.toml", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in bapo_cli::output::RUN_FILES {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn overrides_change_the_run() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.toml", &trainer_toml("bapo", 30));
    let o = bapo(
        &[
            "train", "--config", "c.toml", "--out", "o", "--algorithm", "dapo", "--steps", "5",
            "--track-subset", "10", "--seeds", "4",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = jsonl(&tmp.path().join("o/metrics.jsonl"));
    assert_eq!(m[0]["algorithm"], "dapo");
    assert_eq!(m[0]["seed"], 4);
    assert_eq!(m.len(), 6);
    let b = jsonl(&tmp.path().join("o/bins.jsonl"));
    assert_eq!(b[1]["assignments"].as_array().unwrap().len(), 10);
}

#[test]
fn several_seeds_get_their_own_directories() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.toml", &trainer_toml("grpo", 3));
    let o = bapo(&["train", "--config", "c.toml", "--out", "o", "--seeds", "1,2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("o/seed-1/metrics.jsonl").exists());
    assert!(tmp.path().join("o/seed-2/metrics.jsonl").exists());
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "bad.toml", "[trainer]\nlearning_rat = 1.0\n");
    let o = bapo(&["train", "--config", "bad.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains("learning_rat"));

    write(tmp.path(), "inv.toml", "[trainer]\nalgorithm = \"grpo\"\nrollout_delay = 3\n");
    let o = bapo(&["train", "--config", "inv.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains("rollout_delay"), "{}", stderr(&o));

    write(tmp.path(), "clip.toml", "[trainer]\nclip_low = 1.5\n");
    let o = bapo(&["train", "--config", "clip.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains("clip_low"));
}

#[test]
fn missing_universe_file_has_its_own_exit_code() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.toml", "universe_file = \"absent.json\"\n");
    let o = bapo(&["train", "--config", "c.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_MISSING_INPUT);
    assert_ne!(EXIT_MISSING_INPUT, EXIT_CONFIG);
    assert!(stderr(&o).contains("absent.json"));

    let o = bapo(&["train", "--config", "nowhere.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_MISSING_INPUT);
}

#[test]
fn universe_file_round_trip() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "u.toml", SMALL_UNIVERSE);
    let o = bapo(&["dump-universe", "--config", "u.toml", "--out", "dump"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let inline: UniverseConfig = toml::from_str::<bapo_cli::ExperimentConfig>(SMALL_UNIVERSE)
        .unwrap()
        .universe
        .unwrap();
    let from_file = PromptUniverse::read_json(fs::File::open(tmp.path().join("dump/universe.json")).unwrap()).unwrap();
    assert_eq!(from_file, inline.build().unwrap());

    write(
        tmp.path(),
        "f.toml",
        "universe_file = \"dump/universe.json\"\n[trainer]\ntotal_steps = 2\nbatch_size = 8\nrollout_batch = 8\n",
    );
    let o = bapo(&["train", "--config", "f.toml", "--out", "o"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn env_var_sets_default_output_root() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bapo"))
        .args(["dump-universe"])
        .current_dir(tmp.path())
        .env("BAPO_OUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("elsewhere/universe/universe.json").exists());
}

#[test]
fn compare_refuses_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "a.toml", &trainer_toml("grpo", 2));
    let o = bapo(&["compare", "--config", "a.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_REFUSED);

    write(tmp.path(), "b.toml", &trainer_toml("bapo", 2).replace("seed = 5", "seed = 6"));
    let o = bapo(&["compare", "--config", "a.toml", "--config", "b.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_REFUSED);
    assert!(stderr(&o).contains("different universes"));

    write(tmp.path(), "c.toml", &format!("seeds = [1, 2]\n{}", trainer_toml("bapo", 2)));
    let o = bapo(&["compare", "--config", "a.toml", "--config", "c.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&o), EXIT_REFUSED);
    assert!(stderr(&o).contains("seed set"));
}

fn binom_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

#[test]
fn compare_tables_and_initial_census() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "grpo.toml", &trainer_toml("grpo", 8));
    write(tmp.path(), "bapo.toml", &trainer_toml("bapo", 8));
    let o = bapo(
        &["compare", "--config", "grpo.toml", "--config", "bapo.toml", "--seeds", "0,1", "--out", "cmp"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = tmp.path().join("cmp");

    let (schema, header, rows) = bapo_cli::output::read_csv(&cmp.join("unlocked.csv")).unwrap();
    assert_eq!(schema, "bapo-unlocked-csv/1");
    assert_eq!(header[3], "unlocked_mean");
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["grpo", "bapo"]);
    assert!(rows.iter().all(|r| !r[3].is_empty()));

    let (_, _, rows) = bapo_cli::output::read_csv(&cmp.join("reward.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 8);
    let (_, _, rows) = bapo_cli::output::read_csv(&cmp.join("ledger.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    // grpo: 16 prompts per step, 8 steps, G = 8
    assert!(rows.iter().filter(|r| r[0] == "grpo").all(|r| r[3] == "1024"));

    // step-0 census against the binomial expectation of each tracked prompt
    let u = PromptUniverse::read_json(fs::File::open(cmp.join("grpo/seed-0/universe.json")).unwrap()).unwrap();
    let init = u.initial_policy();
    for label in ["grpo", "bapo"] {
        for seed in [0, 1] {
            let b = jsonl(&cmp.join(format!("{label}/seed-{seed}/bins.jsonl")));
            let tracked: Vec<usize> = b[0]["tracked"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
            let obs: Vec<f64> = b[1]["bins"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            for (k, o) in obs.iter().enumerate() {
                let (mut mean, mut var) = (0.0, 0.0);
                for &p in &tracked {
                    let spec = u.prompt(bapo_core::PromptId(p)).unwrap();
                    let prob = spec.exact_expected_reward(&init).unwrap();
                    let q = binom_pmf(8, k, prob);
                    mean += q;
                    var += q * (1.0 - q);
                }
                assert!((o - mean).abs() <= 3.0 * var.sqrt() + 1e-9, "bin {k}: {o} vs {mean}");
            }
        }
    }
}

#[test]
fn migration_matrices() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.toml", &trainer_toml("bapo", 12));
    assert!(bapo(&["train", "--config", "c.toml", "--out", "run"], tmp.path()).status.success());

    let o = bapo(&["migration", "run", "--steps", "0,4,12"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: MigrationReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/migration.json")).unwrap()).unwrap();
    let first = &rep.matrices[0];
    for (i, row) in first.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                assert_eq!(c, 0);
            }
        }
    }
    assert_eq!(first.regression_fraction, 0.0);
    for m in &rep.matrices {
        assert_eq!(m.row_sums, first.row_sums);
        assert_eq!(m.row_sums.iter().sum::<usize>(), 24);
    }

    let o = bapo(&["migration", "run", "--steps", "5"], tmp.path());
    assert_eq!(code(&o), EXIT_REFUSED);
    assert!(stderr(&o).contains("available steps: [0, 4, 8, 12]"), "{}", stderr(&o));
}

#[test]
fn verify_theory_reports_and_fails_on_corrupt_floor() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "t.toml",
        "[theory]\ntrials = 100\nadversarial_restarts = 4\nadversarial_iterations = 40\nsweep_trials = 20\n",
    );
    let o = bapo(&["verify-theory", "--config", "t.toml", "--out", "th"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: TheoryReport = serde_json::from_str(&fs::read_to_string(tmp.path().join("th/theory.json")).unwrap()).unwrap();
    assert!(rep.passed);
    let s = (7.0f64 / 64.0 + 1e-4).sqrt();
    assert!((rep.constants.k1 - (1.0 - s) / s).abs() < 1e-12);
    let g8 = rep.proposition.iter().find(|p| p.group_size == 8).unwrap();
    assert_eq!((g8.argmax.clone(), g8.max), (vec![0.5], 0.25));

    write(
        tmp.path(),
        "bad.toml",
        "[theory]\ntrials = 10\nadversarial_restarts = 1\nadversarial_iterations = 5\nsweep_trials = 2\ncorrupt_floor = true\n",
    );
    let o = bapo(&["verify-theory", "--config", "bad.toml", "--out", "th2"], tmp.path());
    assert_eq!(code(&o), EXIT_THEORY_FAILED);
    assert!(stderr(&o).contains("variance floor violated"));
}

#[test]
fn theory_config_rejects_unknown_keys() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "t.toml", "[theory]\ntrails = 5\n");
    let o = bapo(&["verify-theory", "--config", "t.toml", "--out", "th"], tmp.path());
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains("trails"));
}
