//! Run configuration: one TOML file plus command-line overrides.
//!
//! Precedence is command line, then file, then built-in defaults. Every
//! value that differs from the default is reported with its source.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tokvla_core::codecs::CodecConfig;
use tokvla_core::env::TaskSpec;
use tokvla_core::rollout::ablation::{AblationConfig, Budget, ModelShape};
use tokvla_core::rollout::RolloutConfig;
use tokvla_core::train::{PackConfig, Strategy};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 500, tasks: vec![TaskSpec::Single], seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub task: TaskSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 99, task: TaskSpec::Single }
    }
}

/// Arms of the ablation suite. A zero data fraction skips the reduced-data
/// arm; `joint = false` skips the joint vision arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmsConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub reference: Strategy,
    pub data_fraction: f64,
    pub data_steps: usize,
    pub joint: bool,
    pub joint_weights: [f64; 2],
    pub history_strategy: Strategy,
    pub history_sweep: Vec<usize>,
    pub loss_window: usize,
}

impl Default for ArmsConfig {
    fn default() -> Self {
        let d = AblationConfig::default();
        let (w_v, w_a) = d.joint_weights.unwrap_or((0.5, 1.0));
        Self {
            strategies: d.strategies,
            seeds: d.seeds,
            reference: d.reference,
            data_fraction: d.data_fraction.unwrap_or(0.0),
            data_steps: d.data_steps,
            joint: d.joint_weights.is_some(),
            joint_weights: [w_v, w_a],
            history_strategy: d.history_strategy,
            history_sweep: d.history_sweep,
            loss_window: d.loss_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub codecs: CodecConfig,
    pub model: ModelShape,
    pub posttrain: Budget,
    pub finetune: Budget,
    /// Corpus packing. History settings are taken from `rollout`.
    pub pack: PackConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub ablation: ArmsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            data: DataConfig::default(),
            codecs: CodecConfig::default(),
            model: a.model,
            posttrain: a.posttrain,
            finetune: a.finetune,
            pack: a.pack,
            rollout: a.rollout,
            eval: EvalConfig::default(),
            ablation: ArmsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Packing settings with the history window of the rollout.
    pub fn pack(&self) -> PackConfig {
        PackConfig { history: self.rollout.history, history_stride: self.rollout.history_stride, ..self.pack }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        let a = &self.ablation;
        AblationConfig {
            strategies: a.strategies.clone(),
            seeds: a.seeds.clone(),
            model: self.model,
            posttrain: self.posttrain,
            finetune: self.finetune,
            pack: self.pack(),
            rollout: self.rollout,
            task: self.eval.task,
            eval_episodes: self.eval.episodes,
            eval_seed: self.eval.seed,
            reference: a.reference,
            data_fraction: (a.data_fraction > 0.0).then_some(a.data_fraction),
            data_steps: a.data_steps,
            joint_weights: a.joint.then_some((a.joint_weights[0], a.joint_weights[1])),
            history_strategy: a.history_strategy,
            history_sweep: a.history_sweep.clone(),
            loss_window: a.loss_window,
        }
    }
}

/// Parses `key.path=value`. The value is read as a TOML literal and falls
/// back to a plain string.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn leaves(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => leaves(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// A resolved configuration and where each non-default value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    /// `key = value (source)` lines.
    pub log: Vec<String>,
}

pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Resolved> {
    let mut root = toml::Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut log = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Core(tokvla_core::Error::Data { path: path.into(), msg: e.to_string() }))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut set = Vec::new();
        leaves("", &table, &mut set);
        for (k, v) in set {
            log.push(format!("{k} = {v} (file)"));
            set_path(&mut root, &k, v)?;
        }
    }
    for (k, v) in overrides {
        log.push(format!("{k} = {v} (cli)"));
        set_path(&mut root, k, v.clone())?;
    }
    let config: RunConfig =
        toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    Ok(Resolved { config, log })
}
