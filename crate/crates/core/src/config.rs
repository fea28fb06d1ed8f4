//! Sectioned TOML run configuration: `[data] [model] [loss] [train] [eval]`
//! plus a top-level `schema_version`.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, FoldProtocol};
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, Scorer, DEFAULT_YAW_EDGES};
use crate::losses::LossConfig;
use crate::networks::GeneratorConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_folds: usize,
    pub same_pairs_per_subject: usize,
    pub diff_pairs_per_subject: usize,
    pub fold_seed: u64,
    /// Fold kept out of training by `train` and `ablate`, and evaluated by them.
    pub holdout_fold: Option<usize>,
    pub far_targets: Vec<f64>,
    pub ranks: Vec<usize>,
    pub yaw_bins: Vec<u32>,
    pub scorer: Scorer,
    /// Cross-reconstruction from the bottleneck alone.
    pub zero_skips: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let s = EvalSettings::default();
        let p = FoldProtocol::default();
        EvalOptions {
            n_folds: p.n_folds,
            same_pairs_per_subject: p.same_pairs_per_subject,
            diff_pairs_per_subject: p.diff_pairs_per_subject,
            fold_seed: 0,
            holdout_fold: None,
            far_targets: s.far_targets,
            ranks: s.ks,
            yaw_bins: DEFAULT_YAW_EDGES.to_vec(),
            scorer: s.scorer,
            zero_skips: false,
        }
    }
}

impl EvalOptions {
    pub fn protocol(&self) -> FoldProtocol {
        FoldProtocol {
            n_folds: self.n_folds,
            same_pairs_per_subject: self.same_pairs_per_subject,
            diff_pairs_per_subject: self.diff_pairs_per_subject,
            ..FoldProtocol::default()
        }
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            far_targets: self.far_targets.clone(),
            ks: self.ranks.clone(),
            scorer: self.scorer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Config("eval.n_folds must be positive".into()));
        }
        if let Some(h) = self.holdout_fold {
            if h >= self.n_folds {
                return Err(Error::Config(format!(
                    "eval.holdout_fold {h} must be below n_folds {}",
                    self.n_folds
                )));
            }
        }
        if self.far_targets.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("eval.far_targets must lie in [0, 1]".into()));
        }
        if self.ranks.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval.ranks must be positive".into()));
        }
        if self.yaw_bins.is_empty() || self.yaw_bins.iter().any(|&e| e == 0 || e > 90) {
            return Err(Error::Config("eval.yaw_bins must be edges in (0, 90]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DatasetSpec,
    pub model: GeneratorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DatasetSpec::default(),
            model: GeneratorConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config document. Unknown keys are rejected
    /// with their full path (e.g. `train.batchsize`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        let mut cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies the `[loss]` section into the training config.
    pub fn resolve(&mut self) {
        self.train.loss_config = self.loss.clone();
    }

    /// Replaces every seed (data, model/batches, folds).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.eval.fold_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model.image_size {:?} differs from data.image_size {:?}",
                self.model.image_size.hwc(),
                self.data.image_size.hwc()
            )));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
