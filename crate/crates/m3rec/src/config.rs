//! Experiment configuration: one TOML file, `--set key=value` overrides
//! and the `M3REC_SEED` environment variable for the default seed.

use std::path::{Path, PathBuf};

use m3rec_core::config::{Ablations, ModelConfig, SimConfig, TrainSchedule};
use m3rec_core::evalmetrics::RerankPool;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::ingest::ColumnMap;

pub const SEED_ENV: &str = "M3REC_SEED";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Logs from `simulate`; embeddings are the simulator catalog.
    Simulator,
    /// Logs from `ingest`; embeddings are read from the run directory.
    Ingested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Run directory holding logs, checkpoint, metrics and reports.
    pub dir: PathBuf,
    pub source: DataSource,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            source: DataSource::Simulator,
        }
    }
}

impl Paths {
    pub fn train_logs(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }
    pub fn test_logs(&self) -> PathBuf {
        self.dir.join("test.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn reports(&self) -> PathBuf {
        self.dir.join("reports")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Slate,
    Catalog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out users evaluated online; `0` means every test user.
    pub n_users: usize,
    /// Online session length; `0` means the simulator episode length.
    pub horizon: usize,
    pub slate_sizes: Vec<usize>,
    pub rerank_pool: PoolKind,
    /// Candidate count when `rerank_pool = "catalog"`; `0` means all items.
    pub catalog_candidates: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_users: 0,
            horizon: 0,
            slate_sizes: vec![3, 5],
            rerank_pool: PoolKind::Slate,
            catalog_candidates: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub ablations: Ablations,
    pub paths: Paths,
    pub eval: EvalConfig,
    pub ingest: ColumnMap,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            ablations: Ablations::default(),
            paths: Paths::default(),
            eval: EvalConfig::default(),
            ingest: ColumnMap::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` (TOML), applies `overrides` (`key=value`, dotted keys)
    /// and validates. When neither sets `seed`, `env_seed` (the value of
    /// `M3REC_SEED`) is used before the built-in default.
    pub fn from_toml(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                let seed: u64 = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) with overrides and the
    /// seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io(p))?,
            None => String::new(),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::from_toml(&text, overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.ingest.validate()?;
        if self.eval.slate_sizes.is_empty() {
            return Err(Error::Config("eval.slate_sizes must not be empty".into()));
        }
        if self.paths.source == DataSource::Simulator {
            if let Some(k) = self.eval.slate_sizes.iter().find(|&&k| k == 0 || k > self.sim.n_items) {
                return Err(Error::Config(format!("eval.slate_sizes: {k} not in 1..={}", self.sim.n_items)));
            }
        }
        Ok(())
    }

    pub fn rerank_pool(&self, n_items: usize) -> RerankPool {
        match self.eval.rerank_pool {
            PoolKind::Slate => RerankPool::Slate,
            PoolKind::Catalog if self.eval.catalog_candidates == 0 => RerankPool::Catalog(n_items),
            PoolKind::Catalog => RerankPool::Catalog(self.eval.catalog_candidates.min(n_items)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {spec:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set: bad key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set: {key} crosses the non-table `{p}`")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
