//! Run configuration: a sectioned TOML file plus `section.key=value` overrides.
//!
//! ```toml
//! [run]
//! seed = 0
//!
//! [task]
//! family = "sine"
//!
//! [training]
//! mode = "lava-last-layer"
//! support = 10
//! epochs = 200
//! ```
//!
//! Every key is optional; missing keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::GridSpec;
use crate::tasks::{Series, TaskError, TaskFamily, TaskSource};
use crate::training::{HyperConfig, LrSchedule, Method};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}`: expected section.key=value")]
    Override(String),
    #[error("config field {0}")]
    Invalid(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSection {
    pub path: PathBuf,
    pub time_column: String,
    pub value_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// A task family name, or `csv` to read `[task.csv]`.
    pub family: String,
    pub csv: Option<CsvSection>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            family: "sine".into(),
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub context_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = HyperConfig::default();
        Self {
            hidden: h.hidden,
            context_dim: h.context_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub mode: Method,
    pub alpha: f64,
    pub outer_lr: f64,
    pub eps: f64,
    pub support: usize,
    pub query: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub inner_steps: usize,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub variance_resamples: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = HyperConfig::default();
        Self {
            mode: h.mode,
            alpha: h.alpha,
            outer_lr: h.outer_lr,
            eps: h.eps,
            support: h.support,
            query: h.query,
            meta_batch: h.meta_batch,
            epochs: h.epochs,
            tasks_per_epoch: h.tasks_per_epoch,
            inner_steps: h.inner_steps,
            grad_clip: h.grad_clip,
            lr_schedule: h.lr_schedule,
            variance_resamples: h.variance_resamples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: 100,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub resamples: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid_x: [f64; 2],
    pub grid_y: [f64; 2],
    pub sigmas: Vec<f64>,
    pub supports: Vec<usize>,
    pub timing_steps: Vec<usize>,
    pub timing_warmup: usize,
    pub timing_iterations: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            resamples: 100,
            grid_width: g.width,
            grid_height: g.height,
            grid_x: [g.x_range.0, g.x_range.1],
            grid_y: [g.y_range.0, g.y_range.1],
            sigmas: vec![0.0, 1.0, 3.0],
            supports: vec![5, 10, 20],
            timing_steps: vec![1, 2, 3],
            timing_warmup: 5,
            timing_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides, then validates.
    /// Override values are read as TOML values, falling back to strings.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hyper().validate().map_err(|m| ConfigError::Invalid(format!("[training]/[model]/[run]: {m}")))?;
        if self.task.family == "csv" {
            let csv = self
                .task
                .csv
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("task.csv: required when task.family = \"csv\"".into()))?;
            if csv.time_column.is_empty() || csv.value_columns.is_empty() {
                return Err(ConfigError::Invalid(
                    "task.csv: time_column and value_columns must be set".into(),
                ));
            }
        } else {
            self.task
                .family
                .parse::<TaskFamily>()
                .map_err(|e| ConfigError::Invalid(format!("task.family: {e}")))?;
        }
        if self.eval.tasks == 0 || self.eval.seeds.is_empty() {
            return Err(ConfigError::Invalid("eval: tasks and seeds must be non-empty".into()));
        }
        if self.experiment.resamples < 2 {
            return Err(ConfigError::Invalid("experiment.resamples: must be >= 2".into()));
        }
        if self.experiment.grid_width == 0 || self.experiment.grid_height == 0 {
            return Err(ConfigError::Invalid("experiment.grid_width/grid_height: must be >= 1".into()));
        }
        if self.experiment.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(ConfigError::Invalid("experiment.sigmas: must be >= 0".into()));
        }
        if self.experiment.supports.contains(&0) || self.experiment.timing_steps.contains(&0) {
            return Err(ConfigError::Invalid("experiment.supports/timing_steps: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> HyperConfig {
        let t = &self.training;
        HyperConfig {
            alpha: t.alpha,
            outer_lr: t.outer_lr,
            eps: t.eps,
            support: t.support,
            query: t.query,
            meta_batch: t.meta_batch,
            epochs: t.epochs,
            tasks_per_epoch: t.tasks_per_epoch,
            seed: self.run.seed,
            mode: t.mode,
            inner_steps: t.inner_steps,
            hidden: self.model.hidden.clone(),
            context_dim: self.model.context_dim,
            grad_clip: t.grad_clip,
            lr_schedule: t.lr_schedule,
            workers: self.run.workers,
            variance_resamples: t.variance_resamples,
        }
    }

    pub fn grid(&self) -> GridSpec {
        let e = &self.experiment;
        GridSpec {
            x_range: (e.grid_x[0], e.grid_x[1]),
            y_range: (e.grid_y[0], e.grid_y[1]),
            width: e.grid_width,
            height: e.grid_height,
        }
    }

    /// Resolves the configured task distribution, reading the CSV if any.
    pub fn task_source(&self) -> Result<TaskSource, ConfigError> {
        if self.task.family == "csv" {
            let csv = self.task.csv.as_ref().expect("validated");
            let cols: Vec<&str> = csv.value_columns.iter().map(String::as_str).collect();
            let series = Series::from_path(&csv.path, &csv.time_column, &cols)?;
            let window = self.training.support + self.training.query;
            if window > series.len() {
                return Err(TaskError::WindowTooLarge {
                    window,
                    rows: series.len(),
                }
                .into());
            }
            Ok(TaskSource::Series(series))
        } else {
            Ok(TaskSource::Family(self.task.family.parse()?))
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Written to the output directory before a command does any work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub started_unix: u64,
    pub args: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, output_dir: &Path, config: &RunConfig) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.run.seed,
            output_dir: output_dir.to_path_buf(),
            started_unix,
            args,
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{spec} ({part} is not a section)")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
