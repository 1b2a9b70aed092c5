//! Run configuration and its `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! d = 20
//! variant = full
//! train_path = train.json
//! ```
//!
//! Keys are the [`RunConfig`] field names. Later lines override earlier
//! ones; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::output::LossWeights;
use crate::ruminate::Variant;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub d: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub filters: usize,
    pub filter_width: usize,
    pub max_word_len: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub patience: usize,
    pub l2: f64,
    pub aqsl: f64,
    pub dropout: f64,
    pub window: usize,
    pub seed: u64,
    pub variant: Variant,
    pub max_steps: usize,
    pub eval_every: usize,
    pub max_context: Option<usize>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub glove_path: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            d: 100,
            word_dim: 100,
            char_dim: 8,
            filters: 100,
            filter_width: 5,
            max_word_len: 16,
            batch_size: 30,
            lr_initial: 0.5,
            lr_decayed: 0.2,
            patience: 3,
            l2: 1e-4,
            aqsl: 1.0,
            dropout: 0.2,
            window: 15,
            seed: 0,
            variant: Variant::Full,
            max_steps: 40_000,
            eval_every: 1000,
            max_context: None,
            train_path: None,
            dev_path: None,
            glove_path: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }

    /// Small settings that train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            d: 20,
            word_dim: 20,
            filters: 20,
            batch_size: 16,
            max_steps: 500,
            eval_every: 50,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(ConfigError::BadValue {
                key: "profile".into(),
                value: other.into(),
                msg: "expected paper or desk".into(),
            }),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            filters: self.filters,
            filter_width: self.filter_width,
            max_word_len: self.max_word_len,
            variant: self.variant,
            window: self.window,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_initial: self.lr_initial,
            lr_decayed: self.lr_decayed,
            patience: self.patience,
            loss: LossWeights {
                l2: self.l2,
                aqsl: self.aqsl,
            },
            dropout: self.dropout,
            seed: self.seed,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.d == 0 || self.batch_size == 0 {
            return bad("d and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr_initial > 0.0 && self.lr_decayed > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.l2 < 0.0 || self.aqsl < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                msg: e.to_string(),
            })
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "d" => self.d = parse(key, value)?,
            "word_dim" => self.word_dim = parse(key, value)?,
            "char_dim" => self.char_dim = parse(key, value)?,
            "filters" => self.filters = parse(key, value)?,
            "filter_width" => self.filter_width = parse(key, value)?,
            "max_word_len" => self.max_word_len = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_initial" => self.lr_initial = parse(key, value)?,
            "lr_decayed" => self.lr_decayed = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "aqsl" => self.aqsl = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "max_context" => {
                self.max_context = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train_path" => self.train_path = path(value),
            "dev_path" => self.dev_path = path(value),
            "glove_path" => self.glove_path = path(value),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`.
    pub fn apply_str(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| ConfigError::Syntax {
                path: origin.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        self.apply_str(&text, &path.display().to_string())
    }

    /// Resolve relative data paths against `dir`.
    pub fn resolve_data_dir(&mut self, dir: &Path) {
        for p in [&mut self.train_path, &mut self.dev_path, &mut self.glove_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
