use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pfcpgan_core::data::{load_dataset_with_shape, subject_ids};
use pfcpgan_core::eval::{
    build_gallery, cross_reconstruct_batch, evaluate_by_yaw, evaluate_folds, gar_at_far, identify,
    reconstruction_errors, roc_from_scores, save_panel, score_pairs, summarize,
    verification_report, write_ablation_csv, write_eval_report, write_recon_mse, write_roc_csv,
    write_yaw_csv, RocCurve,
};
use pfcpgan_core::trainer::{read_manifest, run_ablation_suite, AblationSuite, TRAIN_LOG_HEADER};
use pfcpgan_core::{
    export_dataset, generate_synthetic_dataset, load_checkpoint, seeded_folds, AblationPreset,
    Domain, Error, ImageSample, ImageShape, Result, RunConfig, Scalar, Trainer,
};

use crate::plot;
use crate::{Common, Direction, Protocol};

/// Flags shared by every subcommand.
pub struct Globals {
    pub seed: Option<u64>,
    /// 32 or 64.
    pub precision: Option<u32>,
}

const RUN_ROOT_ENV: &str = "PFCPGAN_RUN_ROOT";

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        if $precision == 64 { $f::<f64>($($arg),*) } else { $f::<f32>($($arg),*) }
    };
}

fn load_config(globals: &Globals, common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    Ok(match globals.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    if let Some(out) = &common.out {
        return Ok(out.clone());
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(command)),
        None => Err(Error::Config(format!(
            "no output directory: pass --out or set {RUN_ROOT_ENV}"
        ))),
    }
}

/// Creates `dir`, refusing a non-empty one unless `allow_existing`.
fn prepare_out(dir: &Path, allow_existing: bool) -> Result<()> {
    if dir.exists() && !allow_existing {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::io(
                dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is not empty (use --force)",
                ),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    write_text(path, &(text + "\n"))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.resolved.toml"), &cfg.to_toml_string()?)
}

fn load_samples(data: Option<&Path>, cfg: &RunConfig, shape: ImageShape) -> Result<Vec<ImageSample>> {
    match data {
        Some(dir) => load_dataset_with_shape(dir, Some(shape)),
        None => {
            if cfg.data.image_size != shape {
                return Err(Error::Config(format!(
                    "data.image_size {:?} does not match the model's {:?}",
                    cfg.data.image_size.hwc(),
                    shape.hwc()
                )));
            }
            generate_synthetic_dataset(&cfg.data)
        }
    }
}

fn data_label(data: Option<&Path>) -> String {
    data.map_or_else(|| "synthetic".to_string(), |d| d.display().to_string())
}

fn precision_of_checkpoint(globals: &Globals, ckpt: &Path) -> Result<u32> {
    if let Some(p) = globals.precision {
        return Ok(p);
    }
    match read_manifest(ckpt)?.dtype.as_str() {
        "f64" => Ok(64),
        "f32" => Ok(32),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

pub fn generate(globals: &Globals, common: &Common) -> Result<()> {
    let cfg = load_config(globals, common)?;
    cfg.validate()?;
    let dir = out_dir(common, "generate")?;
    if common.force && dir.is_dir() {
        // Only what a previous `generate` wrote.
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if path.is_dir() && name.parse::<u32>().is_ok() {
                fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            } else if name == "dataset_meta.json" || name == "config.resolved.toml" {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    prepare_out(&dir, common.force)?;
    let samples = generate_synthetic_dataset(&cfg.data)?;
    export_dataset(&samples, &dir)?;
    write_resolved(&dir, &cfg)?;
    write_json(
        &dir.join("dataset_meta.json"),
        &serde_json::json!({
            "spec": cfg.data,
            "n_samples": samples.len(),
            "n_subjects": subject_ids(&samples).len(),
        }),
    )?;
    println!("wrote {} images to {}", samples.len(), dir.display());
    Ok(())
}

/// Drops log rows past `step` so a resumed run appends where the
/// checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 && line == TRAIN_LOG_HEADER
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

pub fn train(
    globals: &Globals,
    common: &Common,
    data: Option<&Path>,
    resume: Option<&Path>,
    preset: Option<AblationPreset>,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(globals, common)?;
    if let Some(p) = preset {
        cfg.train.ablation_preset = p;
    }
    if let Some(m) = max_steps {
        cfg.train.max_steps = m;
    }
    cfg.validate()?;
    let dir = out_dir(common, "train")?;
    prepare_out(&dir, common.force || resume.is_some())?;
    let precision = match resume {
        Some(ckpt) => precision_of_checkpoint(globals, ckpt)?,
        None => globals.precision.unwrap_or(32),
    };
    dispatch!(precision, train_as(cfg, &dir, data, resume, max_steps, common.plot))
}

fn train_as<T: Scalar>(
    mut cfg: RunConfig,
    dir: &Path,
    data: Option<&Path>,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    plot: bool,
) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = Trainer::<T>::resume(ckpt)?;
            if let Some(m) = max_steps {
                t.config.max_steps = m;
            }
            t.config.validate()?;
            // The checkpoint's configs win; echo them as the resolved run.
            cfg.model = t.state.config.clone();
            cfg.loss = t.config.loss_config.clone();
            cfg.train = t.config.clone();
            truncate_log(&dir.join("train_log.csv"), t.state.step)?;
            t
        }
        None => Trainer::<T>::new(&cfg.model, cfg.train.clone())?,
    };
    let samples = load_samples(data, &cfg, cfg.model.image_size)?;
    let train_samples = match cfg.eval.holdout_fold {
        Some(h) => seeded_folds(&samples, &cfg.eval.protocol(), cfg.eval.fold_seed)?[h].train_samples(&samples),
        None => samples,
    };
    write_resolved(dir, &cfg)?;
    let outcome = trainer.run(&train_samples, Some(dir))?;
    let last = match outcome.checkpoints.last() {
        Some(p) => p.clone(),
        None => trainer.save(dir)?,
    };
    write_json(
        &dir.join("run_meta.json"),
        &serde_json::json!({
            "command": "train",
            "dtype": T::DTYPE,
            "data": data_label(data),
            "resumed_from": resume.map(|p| p.display().to_string()),
            "n_train_samples": train_samples.len(),
            "final_step": trainer.state.step,
            "final_checkpoint": last.display().to_string(),
            "final_digest": read_manifest(&last)?.digest,
        }),
    )?;
    if plot {
        plot_train_log(&dir.join("train_log.csv"), &dir.join("train_loss.png"))?;
    }
    println!("step {}; checkpoint {}", trainer.state.step, last.display());
    Ok(())
}

fn plot_train_log(csv: &Path, png: &Path) -> Result<()> {
    let (header, rows) = pfcpgan_core::eval::read_csv_rows(csv)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let series: Vec<(String, Vec<(f64, f64)>)> = ["total", "l_cpl"]
        .iter()
        .filter_map(|name| {
            let c = col(name)?;
            let pts = rows
                .iter()
                .filter_map(|r| Some((r.first()?.parse().ok()?, r.get(c)?.parse().ok()?)))
                .collect();
            Some((name.to_string(), pts))
        })
        .collect();
    plot::line_chart(png, &series)
}

pub fn eval(
    globals: &Globals,
    common: &Common,
    ckpt: &Path,
    data: Option<&Path>,
    protocol: Protocol,
) -> Result<()> {
    let mut cfg = load_config(globals, common)?;
    let manifest = read_manifest(ckpt)?;
    cfg.model = manifest.model_config;
    let precision = precision_of_checkpoint(globals, ckpt)?;
    let dir = out_dir(common, "eval")?;
    prepare_out(&dir, common.force)?;
    dispatch!(precision, eval_as(&cfg, &dir, ckpt, data, protocol, common.plot))
}

fn eval_as<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    ckpt: &Path,
    data: Option<&Path>,
    protocol: Protocol,
    plot: bool,
) -> Result<()> {
    let (state, _, _) = load_checkpoint::<T>(ckpt)?;
    let samples = load_samples(data, cfg, cfg.model.image_size)?;
    let settings = cfg.eval.settings();
    let folds = seeded_folds(&samples, &cfg.eval.protocol(), cfg.eval.fold_seed)?;
    write_resolved(dir, cfg)?;

    // Identification-style protocols use the held-out fold's subjects when one
    // is configured, every subject otherwise.
    let (subjects, pairs): (BTreeSet<u32>, Vec<_>) = match cfg.eval.holdout_fold {
        Some(h) => (folds[h].test_subjects.clone(), folds[h].test_pairs.clone()),
        None => (
            subject_ids(&samples).into_iter().collect(),
            folds.iter().flat_map(|f| f.test_pairs.iter().cloned()).collect(),
        ),
    };
    let gallery = || build_gallery(&samples, &subjects);
    let probes: Vec<&ImageSample> = samples
        .iter()
        .filter(|s| s.domain == Domain::Profile && subjects.contains(&s.subject_id))
        .collect();

    let curve: RocCurve;
    let summary = match protocol {
        Protocol::Folds => {
            let (summary, _) = evaluate_folds(&state, &samples, &folds, &settings)?;
            let pooled: Vec<_> = folds.iter().flat_map(|f| f.test_pairs.iter().cloned()).collect();
            curve = roc_from_scores(&score_pairs(&state, &pooled, settings.scorer)?)?;
            summary
        }
        Protocol::Identify => {
            let scored = score_pairs(&state, &pairs, settings.scorer)?;
            let (mut report, c) = verification_report(&scored, &settings.far_targets)?;
            curve = c;
            report.fold_id = cfg.eval.holdout_fold;
            let ident = identify(&state, &gallery()?, &probes, &settings.ks, settings.scorer)?;
            report.rank_k = ident.rank_k;
            let mut text = String::from("rank,rate\n");
            for (k, r) in ident.cmc.iter().enumerate() {
                let _ = writeln!(text, "{},{r}", k + 1);
            }
            write_text(&dir.join("cmc.csv"), &text)?;
            if plot {
                let pts = ident.cmc.iter().enumerate().map(|(k, r)| ((k + 1) as f64, *r)).collect();
                plot::line_chart(&dir.join("cmc.png"), &[("cmc".to_string(), pts)])?;
            }
            summarize(vec![report])
        }
        Protocol::Yaw => {
            let scored = score_pairs(&state, &pairs, settings.scorer)?;
            let (mut report, c) = verification_report(&scored, &settings.far_targets)?;
            curve = c;
            report.fold_id = cfg.eval.holdout_fold;
            let bins = evaluate_by_yaw(&state, &probes, &gallery()?, &cfg.eval.yaw_bins, settings.scorer)?;
            write_yaw_csv(&dir.join("yaw_rank1.csv"), &bins, &cfg.eval.yaw_bins)?;
            if plot {
                let bars: Vec<(String, Option<f64>)> = cfg
                    .eval
                    .yaw_bins
                    .iter()
                    .map(|e| (e.to_string(), bins.get(e).map(|b| b.rank1)))
                    .collect();
                plot::bar_chart(&dir.join("yaw_rank1.png"), &bars)?;
            }
            report.per_yaw_rank1 = Some(bins);
            summarize(vec![report])
        }
    };
    write_eval_report(&dir.join("eval_report.csv"), &summary)?;
    write_roc_csv(&dir.join("roc.csv"), &curve)?;
    if plot {
        plot::line_chart(&dir.join("roc.png"), &[("roc".to_string(), roc_points(&curve))])?;
    }
    for (name, value) in &summary.mean {
        if name == "eer" || name == "auc" {
            println!("{name} {value:.4}");
        }
    }
    Ok(())
}

fn roc_points(curve: &RocCurve) -> Vec<(f64, f64)> {
    curve.far.iter().copied().zip(curve.gar.iter().copied()).collect()
}

pub fn ablate(
    globals: &Globals,
    common: &Common,
    data: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(globals, common)?;
    if let Some(m) = max_steps {
        cfg.train.max_steps = m;
    }
    if cfg.eval.holdout_fold.is_none() {
        cfg.eval.holdout_fold = Some(0);
    }
    cfg.validate()?;
    let dir = out_dir(common, "ablate")?;
    prepare_out(&dir, common.force)?;
    dispatch!(globals.precision.unwrap_or(32), ablate_as(&cfg, &dir, data, common.plot))
}

fn ablate_as<T: Scalar>(cfg: &RunConfig, dir: &Path, data: Option<&Path>, plot: bool) -> Result<()> {
    let samples = load_samples(data, cfg, cfg.model.image_size)?;
    write_resolved(dir, cfg)?;
    let suite = AblationSuite {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        protocol: cfg.eval.protocol(),
        fold_seed: cfg.eval.fold_seed,
        holdout_fold: cfg.eval.holdout_fold.unwrap_or(0),
        settings: cfg.eval.settings(),
    };
    let entries = run_ablation_suite::<T>(&samples, &suite, Some(dir))?;
    let rows = entries
        .iter()
        .map(|e| {
            Ok((
                e.preset.name().to_string(),
                e.report.eer,
                e.report.auc,
                gar_at_far(&e.curve, 0.01)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    write_ablation_csv(&dir.join("ablation.csv"), &rows)?;
    write_json(
        &dir.join("ablation_meta.json"),
        &serde_json::json!({
            "dtype": T::DTYPE,
            "data": data_label(data),
            "holdout_fold": suite.holdout_fold,
            "split_digests": entries
                .iter()
                .map(|e| (e.preset.name().to_string(), serde_json::Value::from(e.split_digest.clone())))
                .collect::<serde_json::Map<_, _>>(),
        }),
    )?;
    if plot {
        let series: Vec<_> = entries
            .iter()
            .map(|e| (e.preset.name().to_string(), roc_points(&e.curve)))
            .collect();
        plot::line_chart(&dir.join("roc_ablation.png"), &series)?;
    }
    for (p, eer, auc, gar) in &rows {
        println!("{p}: eer {eer:.4} auc {auc:.4} gar@0.01 {gar:.4}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    globals: &Globals,
    common: &Common,
    ckpt: &Path,
    data: Option<&Path>,
    direction: Direction,
    count: usize,
    zero_skips: bool,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let mut cfg = load_config(globals, common)?;
    cfg.model = read_manifest(ckpt)?.model_config;
    let precision = precision_of_checkpoint(globals, ckpt)?;
    let dir = out_dir(common, "reconstruct")?;
    prepare_out(&dir, common.force)?;
    let zero_skips = zero_skips || cfg.eval.zero_skips;
    dispatch!(precision, reconstruct_as(&cfg, &dir, ckpt, data, direction, count, zero_skips))
}

fn reconstruct_as<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    ckpt: &Path,
    data: Option<&Path>,
    direction: Direction,
    count: usize,
    zero_skips: bool,
) -> Result<()> {
    let (state, _, _) = load_checkpoint::<T>(ckpt)?;
    let samples = load_samples(data, cfg, cfg.model.image_size)?;
    let (source, target) = match direction {
        Direction::P2f => (Domain::Profile, Domain::Frontal),
        Direction::F2p => (Domain::Frontal, Domain::Profile),
    };
    let inputs: Vec<&ImageSample> = samples.iter().filter(|s| s.domain == source).collect();
    if inputs.is_empty() {
        return Err(Error::Protocol(format!(
            "the dataset has no {} images to reconstruct from",
            source.dir_name()
        )));
    }
    write_resolved(dir, cfg)?;
    let outputs = cross_reconstruct_batch(&state, &inputs, target, zero_skips)?;
    let errors = reconstruction_errors(&samples, &inputs, &outputs, target);
    write_recon_mse(&dir.join("recon_mse.csv"), &inputs, &errors)?;
    let n = count.min(inputs.len());
    save_panel(&dir.join("panel.png"), &inputs[..n], &outputs[..n])?;
    let known: Vec<f64> = errors.iter().flatten().copied().collect();
    if !known.is_empty() {
        println!("mean mse {:.5} over {} images", known.iter().sum::<f64>() / known.len() as f64, known.len());
    }
    Ok(())
}
