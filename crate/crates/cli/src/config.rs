//! Experiment configuration files.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! # either an inline universe or `universe_file = "universe.json"`
//! [universe]
//! num_prompts = 256
//! [trainer]
//! algorithm = "bapo"
//! total_steps = 200
//! [theory]
//! trials = 1000
//! ```
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use bapo_core::{Algorithm, PromptUniverse, TheoryConfig, TrainerConfig, UniverseConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub trainer: TrainerConfig,
    pub universe: Option<UniverseConfig>,
    /// Relative paths resolve against the config file's directory.
    pub universe_file: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub theory: TheoryConfig,
}

/// A parsed config together with the directory it was read from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub steps: Option<u64>,
    pub track_subset: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, t: &mut TrainerConfig) {
        if let Some(a) = self.algorithm {
            t.algorithm = a;
        }
        if let Some(s) = self.steps {
            t.total_steps = s;
        }
        if let Some(n) = self.track_subset {
            t.track_subset = n;
        }
    }
}

pub fn parse_config(text: &str, path: &Path) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if cfg.universe.is_some() && cfg.universe_file.is_some() {
        return Err(CliError::Config {
            path: path.to_path_buf(),
            message: "set either [universe] or universe_file, not both".into(),
        });
    }
    if let Some(s) = &cfg.seeds {
        if s.is_empty() {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "seeds: list is empty".into(),
            });
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> CliResult<LoadedConfig> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingInput(path.to_path_buf()))
        }
        Err(e) => {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    };
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        config: parse_config(&text, path)?,
    })
}

impl LoadedConfig {
    /// The config with no file behind it.
    pub fn defaults() -> Self {
        Self {
            path: PathBuf::from("<defaults>"),
            config: ExperimentConfig::default(),
        }
    }

    pub fn base_dir(&self) -> PathBuf {
        self.path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    pub fn universe(&self) -> CliResult<PromptUniverse> {
        match &self.config.universe_file {
            Some(f) => {
                let p = if f.is_absolute() { f.clone() } else { self.base_dir().join(f) };
                let file = fs::File::open(&p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::MissingInput(p.clone()),
                    _ => CliError::Config {
                        path: p.clone(),
                        message: e.to_string(),
                    },
                })?;
                PromptUniverse::read_json(std::io::BufReader::new(file)).map_err(|e| CliError::Config {
                    path: p,
                    message: e.to_string(),
                })
            }
            None => Ok(self.config.universe.clone().unwrap_or_default().build()?),
        }
    }

    /// Seeds from the flag, else the config list, else the trainer seed.
    pub fn seeds(&self, flag: Option<&[u64]>) -> Vec<u64> {
        match (flag, &self.config.seeds) {
            (Some(s), _) => s.to_vec(),
            (None, Some(s)) => s.clone(),
            (None, None) => vec![self.config.trainer.seed],
        }
    }

    pub fn label(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.config.trainer.algorithm.name().to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn universe_bytes(u: &PromptUniverse) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    u.write_json(&mut buf)?;
    Ok(buf)
}

/// Hash of the resolved trainer config and the universe contents.
pub fn config_hash(trainer: &TrainerConfig, universe: &PromptUniverse) -> CliResult<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(trainer).map_err(bapo_core::Error::from)?);
    h.update(universe_bytes(universe)?);
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected_with_field_name() {
        let err = parse_config("[trainer]\nlearning_rat = 1.0\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = parse_config("bogus = 1\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = parse_config(
            "seeds = [1, 2]\n[trainer]\nalgorithm = \"grpo\"\nc2_range = [0.1, 0.4]\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(cfg.trainer.algorithm, Algorithm::Grpo);
        assert_eq!(cfg.trainer.c2_range, (0.1, 0.4));
        assert_eq!(cfg.trainer.group_size, 8);
        assert_eq!(cfg.seeds, Some(vec![1, 2]));
    }

    #[test]
    fn universe_sources_exclusive() {
        let t = "universe_file = \"u.json\"\n[universe]\nnum_prompts = 4\n";
        assert!(parse_config(t, Path::new("x.toml")).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut t = TrainerConfig::default();
        Overrides {
            algorithm: Some(Algorithm::Dapo),
            steps: Some(7),
            track_subset: Some(3),
        }
        .apply(&mut t);
        assert_eq!((t.algorithm, t.total_steps, t.track_subset), (Algorithm::Dapo, 7, 3));
    }
}
