//! Run configuration: a TOML file, `key=value` overrides with dotted keys,
//! and the `PSRP_SEED` environment fallback for the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::LevelRanges;
use crate::decode::PostprocessConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

pub const SEED_ENV: &str = "PSRP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub input_size: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Log every this many iterations.
    pub log_every: usize,
    /// Serial, fixed-order gradient reduction.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            iterations: 1000,
            batch_size: 2,
            seed: 0,
            input_size: 512,
            checkpoint_every: 0,
            log_every: 1,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    /// Per-level `[min, max]` bounds; defaults scale with the input size.
    pub ranges: Option<Vec<(f64, f64)>>,
    /// Fraction of iterations trained with static assignment before the
    /// semantic rule takes over.
    pub semantic_start_fraction: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            ranges: None,
            semantic_start_fraction: 0.5,
        }
    }
}

impl AssignConfig {
    pub fn level_ranges(&self, input_size: usize) -> Result<LevelRanges> {
        let r = match &self.ranges {
            Some(r) => LevelRanges { ranges: r.clone() },
            None => LevelRanges::for_input(input_size),
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub assign: AssignConfig,
    pub postprocess: PostprocessConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if t.input_size == 0 || t.input_size % 32 != 0 {
            return Err(Error::Config(format!("train.input_size {} must be a multiple of 32", t.input_size)));
        }
        if !(0.0..=1.0).contains(&self.assign.semantic_start_fraction) {
            return Err(Error::Config("assign.semantic_start_fraction must lie in [0, 1]".into()));
        }
        self.assign.level_ranges(t.input_size)?;
        self.postprocess.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Layer a config file (optional), then `key=value` overrides, then the
    /// seed environment variable when no seed was given explicitly.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut seed_given = table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            seed_given |= key == "train.seed";
            set_dotted(&mut table, key, parse_value(value.trim()))?;
        }
        if !seed_given {
            if let Some(s) = env_seed {
                let seed: u64 = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
                set_dotted(&mut table, "train.seed", toml::Value::Integer(seed as i64))?;
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::load`] reading the seed fallback from the environment.
    pub fn load_with_env(path: Option<&PathBuf>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::load(path.map(PathBuf::as_path), overrides, env.as_deref())
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(s: &str) -> toml::Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
