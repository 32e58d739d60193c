use std::fs;
use std::path::Path;

use capsule_transformer::model::ModelConfig;
use capsule_transformer::train::{SyntheticTask, TaskKind, TrainConfig};
use capsule_transformer::{Error, Result};

/// Synthetic data settings; the vocabulary comes from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSettings {
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub data_seed: u64,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            kind: TaskKind::Copy,
            min_len: 3,
            max_len: 6,
            train_samples: 2000,
            valid_samples: 100,
            data_seed: 100,
        }
    }
}

/// Every tunable of a run, addressable as `key = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSettings,
    /// Seeds parameter initialization and the training order.
    pub seed: u64,
    /// Print a step line every this many steps; 0 prints none.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            // Copy-task schedule that reaches full validation accuracy on CPU in about a minute.
            train: TrainConfig {
                steps: 2500,
                lr: 3e-3,
                warmup: 100,
                eval_every: 100,
                ..TrainConfig::default()
            },
            task: TaskSettings::default(),
            seed: 0,
            log_every: 100,
        }
    }
}

const TASK_KEYS: [&str; 6] = [
    "task",
    "task_min_len",
    "task_max_len",
    "train_samples",
    "valid_samples",
    "data_seed",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                self.train.seed = self.seed;
            }
            "log_every" => self.log_every = num(key, value)?,
            "task" => self.task.kind = value.parse()?,
            "task_min_len" => self.task.min_len = num(key, value)?,
            "task_max_len" => self.task.max_len = num(key, value)?,
            "train_samples" => self.task.train_samples = num(key, value)?,
            "valid_samples" => self.task.valid_samples = num(key, value)?,
            "data_seed" => self.task.data_seed = num(key, value)?,
            k if ModelConfig::KEYS.contains(&k) => self.model.set(k, value)?,
            k if TrainConfig::KEYS.contains(&k) && k != "seed" => self.train.set(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("seed", self.seed.to_string()), ("log_every", self.log_every.to_string())];
        out.extend(self.model.to_pairs());
        out.extend(self.train.to_pairs().into_iter().filter(|(k, _)| *k != "seed"));
        let t = &self.task;
        let task = [
            t.kind.to_string(),
            t.min_len.to_string(),
            t.max_len.to_string(),
            t.train_samples.to_string(),
            t.valid_samples.to_string(),
            t.data_seed.to_string(),
        ];
        out.extend(TASK_KEYS.into_iter().zip(task));
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic(0, self.task.train_samples).validate(self.model.max_len)
    }

    pub fn synthetic(&self, seed_offset: u64, samples: usize) -> SyntheticTask {
        SyntheticTask {
            kind: self.task.kind,
            vocab_size: self.model.vocab_size,
            min_len: self.task.min_len,
            max_len: self.task.max_len,
            samples,
            seed: self.task.data_seed.wrapping_add(seed_offset),
        }
    }
}
