use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AblationPreset, TrainConfig, TrainLogRecord, Trainer};
use crate::data::{seeded_folds, Fold, FoldProtocol, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_fold, write_roc_csv, EvalReport, EvalSettings, RocCurve};
use crate::networks::{GeneratorConfig, ModelState};
use crate::scalar::Scalar;

/// Everything one ablation run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSuite {
    pub model: GeneratorConfig,
    /// Base training config; its preset is overridden per run.
    pub train: TrainConfig,
    pub protocol: FoldProtocol,
    pub fold_seed: u64,
    /// Fold held out for evaluation; the others are trained on.
    pub holdout_fold: usize,
    pub settings: EvalSettings,
}

#[derive(Clone, Debug)]
pub struct AblationEntry<T> {
    pub preset: AblationPreset,
    pub state: ModelState<T>,
    pub report: EvalReport,
    pub curve: RocCurve,
    pub log: Vec<TrainLogRecord>,
    /// Digest of the train subjects and test pairs; equal across presets.
    pub split_digest: String,
}

/// SHA-256 over the train subjects and the (profile, frontal, label) test
/// pairs of a fold.
pub fn split_digest(fold: &Fold) -> String {
    let mut h = Sha256::new();
    for s in &fold.train_subjects {
        h.update(s.to_le_bytes());
    }
    h.update(b"|");
    for p in &fold.test_pairs {
        h.update(p.profile.sample_id.to_le_bytes());
        h.update(p.frontal.sample_id.to_le_bytes());
        h.update([p.label_y]);
    }
    hex::encode(h.finalize())
}

/// Trains every preset from the same seed on the same subjects and evaluates
/// each on the held-out fold. With `out_dir`, each preset writes its training
/// log, final checkpoint and `roc.csv` under `<out_dir>/<preset>/`.
pub fn run_ablation_suite<T: Scalar>(
    samples: &[ImageSample],
    suite: &AblationSuite,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationEntry<T>>> {
    let folds = seeded_folds(samples, &suite.protocol, suite.fold_seed)?;
    let fold = folds.get(suite.holdout_fold).ok_or_else(|| {
        Error::Config(format!(
            "holdout_fold {} out of range for {} folds",
            suite.holdout_fold,
            folds.len()
        ))
    })?;
    let train_samples = fold.train_samples(samples);
    let digest = split_digest(fold);
    let mut out = Vec::with_capacity(AblationPreset::ALL.len());
    for preset in AblationPreset::ALL {
        let config = TrainConfig {
            ablation_preset: preset,
            ..suite.train.clone()
        };
        let dir = out_dir.map(|d| d.join(preset.name()));
        let mut trainer = Trainer::<T>::new(&suite.model, config)?;
        let outcome = trainer.run(&train_samples, dir.as_deref())?;
        let (report, curve) = evaluate_fold(&trainer.state, samples, fold, &suite.settings)?;
        if let Some(d) = &dir {
            write_roc_csv(&d.join("roc.csv"), &curve)?;
        }
        ::log::info!("preset {}: eer {:.4} auc {:.4}", preset.name(), report.eer, report.auc);
        out.push(AblationEntry {
            preset,
            state: trainer.state,
            report,
            curve,
            log: outcome.records,
            split_digest: digest.clone(),
        });
    }
    Ok(out)
}
