use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{TaskKind, TASK_VOCAB};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::ForwardMode;
use crate::numerics::DType;
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Everything a training or evaluation run needs. Missing fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub mode: ForwardMode,
    pub precision: Precision,
    pub tasks: Vec<TaskKind>,
    /// Train one adapter set on the task mixture instead of one set per task.
    pub multitask: bool,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: TASK_VOCAB,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            lr: AdamWConfig::default().lr,
            weight_decay: 0.0,
            steps: 300,
            batch_size: 16,
            grad_accum: 1,
            seed: 0,
            mode: ForwardMode::Optimized,
            precision: Precision::F64,
            tasks: TaskKind::ALL.to_vec(),
            multitask: false,
            eval_samples: 500,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr = {} must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::Config("task list repeats a task".into()));
        }
        if self.model.vocab_size < TASK_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size = {} is smaller than the task vocabulary ({TASK_VOCAB})",
                self.model.vocab_size
            )));
        }
        let longest = self.tasks.iter().map(|t| t.seq_len()).max().unwrap_or(0);
        if longest > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len = {} is shorter than the longest task sequence ({longest})",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}
