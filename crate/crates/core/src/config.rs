//! Run configuration.
//!
//! Stored as TOML; dotted keys such as `pretrain.epochs = 50` and
//! `[pretrain]` tables are interchangeable. [`RunConfig::with_overrides`]
//! applies `key=value` pairs on top of a parsed document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gate::GateConstants;

/// Settings of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate for embeddings and MLP.
    pub learning_rate: f64,
    /// Adam learning rate for the gate parameters (pretraining only).
    pub gate_learning_rate: f64,
    /// Dual-ascent step for the constraint multipliers (pretraining only).
    pub multiplier_lr: f64,
    /// Validation cadence in epochs; 0 disables.
    pub eval_every: usize,
    /// Stop pretraining once the constraint is met and validation logloss
    /// has not improved for 5 evaluations.
    pub early_stop: bool,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 3e-4,
            gate_learning_rate: 0.05,
            multiplier_lr: 2.0,
            eval_every: 0,
            early_stop: false,
        }
    }
}

impl PhaseConfig {
    pub fn continued() -> Self {
        Self {
            epochs: 3,
            eval_every: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self, phase: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{phase}.batch_size must be >= 1")));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gate_learning_rate", self.gate_learning_rate),
            ("multiplier_lr", self.multiplier_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{phase}.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 10,
            hidden: vec![400, 400, 200],
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub pretrain_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            val: r.val,
            test: r.test,
            pretrain_size: 2_000,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

/// Independent random streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub weights: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            split: seed,
            weights: seed,
            noise: seed,
            shuffle: seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synthetic: Option<SyntheticSpec>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub gate: GateConstants,
    pub pretrain: PhaseConfig,
    #[serde(rename = "continue")]
    pub continued: PhaseConfig,
    /// Fraction of fields to prune.
    pub tau: f64,
    pub seeds: Seeds,
    /// Also train and time a model on all fields.
    pub with_baseline: bool,
    /// Reinitialize the pruned model instead of transferring weights.
    pub from_scratch: bool,
    /// Constraint penalizes `mean(z) - tau` instead of `mean(z) - (1 - tau)`.
    pub compat_eq4: bool,
    /// Compute in 64-bit.
    pub f64: bool,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synthetic: None,
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            gate: GateConstants::default(),
            pretrain: PhaseConfig::default(),
            continued: PhaseConfig::continued(),
            tau: 0.5,
            seeds: Seeds::default(),
            with_baseline: false,
            from_scratch: false,
            compat_eq4: false,
            f64: false,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_table(parse_table(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Parses `text` (possibly empty) and applies `key=value` overrides.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {}", self.tau)));
        }
        self.pretrain.validate("pretrain")?;
        self.continued.validate("continue")?;
        self.gate.validate()?;
        let r = self.split;
        if [r.train, r.val, r.test].iter().any(|v| !(0.0..=1.0).contains(v))
            || (r.train + r.val + r.test - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("split ratios must be in [0,1] and sum to 1".into()));
        }
        if self.model.embed_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.model.weight_decay >= 0.0) {
            return Err(Error::Config("model.weight_decay must be >= 0".into()));
        }
        for p in [&self.data.path, &self.data.schema].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        Ok(())
    }
}

fn parse_table(s: &str) -> Result<toml::Table> {
    s.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("bad config document: {}", e.message())))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for part in parts {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part:?} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
