//! Verification, identification, yaw-binned analysis and cross-domain
//! reconstruction on top of trained embeddings.

mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{from_batch, to_batch, Domain, Fold, ImageSample, ImageShape, PairExample};
use crate::error::{Error, Result};
use crate::networks::ModelState;
use crate::scalar::Scalar;

pub use metrics::{
    auc, best_accuracy, cmc_from_ranks, eer, gar_at_far, mean_std, rank_k_from_ranks, rank_of,
    roc_from_labeled, RocCurve,
};
pub use report::{
    read_csv_rows, reconstruction_panel, write_ablation_csv, write_eval_report, write_recon_mse,
    save_panel, write_roc_csv, write_yaw_csv,
};

pub const DEFAULT_YAW_EDGES: [u32; 6] = [15, 30, 45, 60, 75, 90];
const EMBED_CHUNK: usize = 64;

/// How two embeddings are compared; higher is more similar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Negative Euclidean distance.
    #[default]
    Euclidean,
    Cosine,
}

impl Scorer {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Scorer::Euclidean => -a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Scorer::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair<'a> {
    pub pair: PairExample<'a>,
    pub score: f64,
}

/// Bottleneck embeddings keyed by `sample_id`, each sample encoded by the
/// generator of its own domain. Samples are processed in `sample_id` order.
pub fn embed_samples<T: Scalar>(
    state: &ModelState<T>,
    samples: &[&ImageSample],
) -> Result<HashMap<u64, Vec<f64>>> {
    let mut out = HashMap::new();
    for domain in [Domain::Profile, Domain::Frontal] {
        let mut todo: Vec<&ImageSample> = samples
            .iter()
            .copied()
            .filter(|s| s.domain == domain)
            .collect();
        todo.sort_by_key(|s| s.sample_id);
        todo.dedup_by_key(|s| s.sample_id);
        let gen = state.generator(domain);
        for chunk in todo.chunks(EMBED_CHUNK) {
            let x = to_batch::<T>(chunk)?;
            let z = gen.encode(&x)?.embedding;
            let d = z.c * z.h * z.w;
            let n = z.n;
            for (j, s) in chunk.iter().enumerate() {
                let v: Vec<f64> = (0..d).map(|k| z.data[k * n + j].as_f64()).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite embedding for sample {}",
                        s.sample_id
                    )));
                }
                out.insert(s.sample_id, v);
            }
        }
    }
    Ok(out)
}

/// Scores every pair: profile through the profile encoder, frontal through
/// the frontal encoder.
pub fn score_pairs<'a, T: Scalar>(
    state: &ModelState<T>,
    pairs: &[PairExample<'a>],
    scorer: Scorer,
) -> Result<Vec<ScoredPair<'a>>> {
    for p in pairs {
        if p.profile.domain != Domain::Profile || p.frontal.domain != Domain::Frontal {
            return Err(Error::Protocol(format!(
                "pair ({}, {}) is not (profile, frontal)",
                p.profile.sample_id, p.frontal.sample_id
            )));
        }
    }
    let all: Vec<&ImageSample> = pairs.iter().flat_map(|p| [p.profile, p.frontal]).collect();
    let z = embed_samples(state, &all)?;
    Ok(pairs
        .iter()
        .map(|p| ScoredPair {
            pair: *p,
            score: scorer.score(&z[&p.profile.sample_id], &z[&p.frontal.sample_id]),
        })
        .collect())
}

pub fn roc_from_scores(scored: &[ScoredPair]) -> Result<RocCurve> {
    let labeled: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.pair.is_genuine())).collect();
    roc_from_labeled(&labeled)
}

/// Per-bin rank-1 statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawBin {
    pub rank1: f64,
    pub n_probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fold_id: Option<usize>,
    pub eer: f64,
    pub auc: f64,
    /// Accuracy at the best threshold.
    pub accuracy_best: f64,
    /// Accuracy at the equal-error point, `1 - EER`.
    pub accuracy_eer: f64,
    /// `(far_target, gar)` in the order requested.
    pub gar_at_far: Vec<(f64, f64)>,
    pub rank_k: BTreeMap<usize, f64>,
    pub per_yaw_rank1: Option<BTreeMap<u32, YawBin>>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

pub fn far_label(far: f64) -> String {
    format!("gar@{far}")
}

impl EvalReport {
    /// Flat `(metric, value)` list in a stable order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("eer".to_string(), self.eer),
            ("auc".to_string(), self.auc),
            ("accuracy_best".to_string(), self.accuracy_best),
            ("accuracy_eer".to_string(), self.accuracy_eer),
        ];
        for (far, gar) in &self.gar_at_far {
            out.push((far_label(*far), *gar));
        }
        for (k, v) in &self.rank_k {
            out.push((format!("rank_{k}"), *v));
        }
        if let Some(bins) = &self.per_yaw_rank1 {
            for (edge, b) in bins {
                out.push((format!("rank1_yaw{edge}"), b.rank1));
            }
        }
        out.push(("n_genuine".to_string(), self.n_genuine as f64));
        out.push(("n_impostor".to_string(), self.n_impostor as f64));
        out
    }
}

/// Verification metrics of a scored pair list.
pub fn verification_report(
    scored: &[ScoredPair],
    far_targets: &[f64],
) -> Result<(EvalReport, RocCurve)> {
    let curve = roc_from_scores(scored)?;
    let e = eer(&curve)?;
    let report = EvalReport {
        fold_id: None,
        eer: e,
        auc: auc(&curve)?,
        accuracy_best: best_accuracy(&curve)?,
        accuracy_eer: 1.0 - e,
        gar_at_far: far_targets
            .iter()
            .map(|&f| gar_at_far(&curve, f).map(|g| (f, g)))
            .collect::<Result<_>>()?,
        rank_k: BTreeMap::new(),
        per_yaw_rank1: None,
        n_genuine: curve.n_genuine,
        n_impostor: curve.n_impostor,
    };
    Ok((report, curve))
}

/// First frontal sample (by `sample_id`) of every subject in `subjects`.
pub fn build_gallery<'a>(
    samples: &'a [ImageSample],
    subjects: &BTreeSet<u32>,
) -> Result<Vec<&'a ImageSample>> {
    let mut first: BTreeMap<u32, &ImageSample> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.domain == Domain::Frontal) {
        if subjects.contains(&s.subject_id) {
            first
                .entry(s.subject_id)
                .and_modify(|cur| {
                    if s.sample_id < cur.sample_id {
                        *cur = s
                    }
                })
                .or_insert(s);
        }
    }
    let missing: Vec<u32> = subjects.iter().filter(|s| !first.contains_key(s)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "subjects without a frontal gallery image: {missing:?}"
        )));
    }
    Ok(first.into_values().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identification {
    pub rank_k: BTreeMap<usize, f64>,
    /// Rank-k for k = 1..=gallery size.
    pub cmc: Vec<f64>,
    /// Rank of every probe, in probe order.
    pub ranks: Vec<usize>,
}

/// Closed-set identification of `probes` against a one-image-per-subject
/// gallery from precomputed embeddings.
pub fn identify_embeddings(
    gallery: &[(u32, &[f64])],
    probes: &[(u32, &[f64])],
    scorer: Scorer,
    ks: &[usize],
) -> Result<Identification> {
    let subjects: BTreeSet<u32> = gallery.iter().map(|(s, _)| *s).collect();
    if subjects.len() != gallery.len() {
        return Err(Error::Protocol("gallery subjects are not unique".into()));
    }
    let missing: BTreeSet<u32> = probes
        .iter()
        .map(|(s, _)| *s)
        .filter(|s| !subjects.contains(s))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "probe subjects missing from the gallery: {missing:?}"
        )));
    }
    let ranks = probes
        .iter()
        .map(|(subject, z)| {
            let scores: Vec<(u32, f64)> =
                gallery.iter().map(|(s, g)| (*s, scorer.score(z, g))).collect();
            rank_of(&scores, *subject)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Identification {
        rank_k: rank_k_from_ranks(&ranks, ks),
        cmc: cmc_from_ranks(&ranks, gallery.len()),
        ranks,
    })
}

pub fn identify<T: Scalar>(
    state: &ModelState<T>,
    gallery: &[&ImageSample],
    probes: &[&ImageSample],
    ks: &[usize],
    scorer: Scorer,
) -> Result<Identification> {
    if let Some(g) = gallery.iter().find(|g| g.domain != Domain::Frontal) {
        return Err(Error::Protocol(format!("gallery sample {} is not frontal", g.sample_id)));
    }
    if let Some(p) = probes.iter().find(|p| p.domain != Domain::Profile) {
        return Err(Error::Protocol(format!("probe sample {} is not a profile", p.sample_id)));
    }
    let all: Vec<&ImageSample> = gallery.iter().chain(probes).copied().collect();
    let z = embed_samples(state, &all)?;
    let g: Vec<(u32, &[f64])> = gallery
        .iter()
        .map(|s| (s.subject_id, z[&s.sample_id].as_slice()))
        .collect();
    let p: Vec<(u32, &[f64])> = probes
        .iter()
        .map(|s| (s.subject_id, z[&s.sample_id].as_slice()))
        .collect();
    identify_embeddings(&g, &p, scorer, ks)
}

/// Smallest edge `>= |yaw|`.
pub fn yaw_bin(yaw_deg: f64, edges: &[u32]) -> Result<u32> {
    if !(-90.0..=90.0).contains(&yaw_deg) {
        return Err(Error::Data(format!("yaw {yaw_deg} outside [-90, 90]")));
    }
    let a = yaw_deg.abs();
    edges
        .iter()
        .copied()
        .filter(|&e| f64::from(e) >= a)
        .min()
        .ok_or_else(|| Error::Data(format!("yaw {yaw_deg} exceeds the largest bin edge")))
}

/// Rank-1 per yaw bin; bins without probes are absent.
pub fn evaluate_by_yaw<T: Scalar>(
    state: &ModelState<T>,
    probes: &[&ImageSample],
    gallery: &[&ImageSample],
    bin_edges: &[u32],
    scorer: Scorer,
) -> Result<BTreeMap<u32, YawBin>> {
    let bins = probes
        .iter()
        .map(|p| yaw_bin(p.yaw_deg, bin_edges))
        .collect::<Result<Vec<_>>>()?;
    let ident = identify(state, gallery, probes, &[1], scorer)?;
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (bin, rank) in bins.iter().zip(&ident.ranks) {
        let e = acc.entry(*bin).or_default();
        e.1 += 1;
        if *rank == 1 {
            e.0 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(b, (hits, n))| {
            (
                b,
                YawBin {
                    rank1: hits as f64 / n as f64,
                    n_probes: n,
                },
            )
        })
        .collect())
}

/// Mean and sample standard deviation of every metric across reports.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub reports: Vec<EvalReport>,
    pub mean: Vec<(String, f64)>,
    pub std: Vec<(String, f64)>,
}

pub fn summarize(reports: Vec<EvalReport>) -> FoldSummary {
    let names: Vec<String> = reports
        .first()
        .map(|r| r.metrics().into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for name in names {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.metrics().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
            .collect();
        let (m, s) = mean_std(&values);
        mean.push((name.clone(), m));
        std.push((name, s));
    }
    FoldSummary { reports, mean, std }
}

/// Evaluation knobs shared by the fold, identification and yaw protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub far_targets: Vec<f64>,
    pub ks: Vec<usize>,
    pub scorer: Scorer,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            far_targets: vec![1e-2, 1e-3],
            ks: vec![1, 5],
            scorer: Scorer::Euclidean,
        }
    }
}

/// Verification and identification report for one fold: its test pairs for
/// verification, its test subjects' profiles against their first frontals
/// for identification.
pub fn evaluate_fold<T: Scalar>(
    state: &ModelState<T>,
    samples: &[ImageSample],
    fold: &Fold,
    settings: &EvalSettings,
) -> Result<(EvalReport, RocCurve)> {
    let scored = score_pairs(state, &fold.test_pairs, settings.scorer)?;
    let (mut report, curve) = verification_report(&scored, &settings.far_targets)?;
    report.fold_id = Some(fold.index);
    let gallery = build_gallery(samples, &fold.test_subjects)?;
    let probes: Vec<&ImageSample> = samples
        .iter()
        .filter(|s| s.domain == Domain::Profile && fold.test_subjects.contains(&s.subject_id))
        .collect();
    if !probes.is_empty() {
        report.rank_k = identify(state, &gallery, &probes, &settings.ks, settings.scorer)?.rank_k;
    }
    Ok((report, curve))
}

/// One report per fold plus the mean/std summary.
pub fn evaluate_folds<T: Scalar>(
    state: &ModelState<T>,
    samples: &[ImageSample],
    folds: &[Fold],
    settings: &EvalSettings,
) -> Result<(FoldSummary, Vec<RocCurve>)> {
    let mut reports = Vec::with_capacity(folds.len());
    let mut curves = Vec::with_capacity(folds.len());
    for fold in folds {
        let (r, c) = evaluate_fold(state, samples, fold, settings)?;
        reports.push(r);
        curves.push(c);
    }
    Ok((summarize(reports), curves))
}

/// Encodes with the source-domain generator and decodes with the
/// target-domain decoder. Skips come from the source encoder unless
/// `zero_skips` is set.
pub fn cross_reconstruct_batch<T: Scalar>(
    state: &ModelState<T>,
    images: &[&ImageSample],
    target: Domain,
    zero_skips: bool,
) -> Result<Vec<Vec<f32>>> {
    if let Some(s) = images.iter().find(|s| s.domain == target) {
        return Err(Error::Protocol(format!(
            "sample {} is already {:?}; cross-reconstruction needs the other domain",
            s.sample_id, target
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let x = to_batch::<T>(chunk)?;
        let enc = state.generator(target.other()).encode(&x)?;
        let skips = enc.skips();
        let dec = state
            .generator(target)
            .decode(&enc.embedding, if zero_skips { None } else { Some(&skips) })?;
        if !dec.output.all_finite() {
            return Err(Error::Numeric("non-finite reconstruction".into()));
        }
        out.extend((0..chunk.len()).map(|j| from_batch(&dec.output, j)));
    }
    Ok(out)
}

pub fn cross_reconstruct<T: Scalar>(
    state: &ModelState<T>,
    image: &ImageSample,
    target: Domain,
    zero_skips: bool,
) -> Result<Vec<f32>> {
    Ok(cross_reconstruct_batch(state, &[image], target, zero_skips)?.remove(0))
}

/// Per-pixel MSE of every reconstruction against the first target-domain
/// image (by `sample_id`) of the same subject; `None` when the subject has
/// no such image.
pub fn reconstruction_errors(
    samples: &[ImageSample],
    inputs: &[&ImageSample],
    outputs: &[Vec<f32>],
    target: Domain,
) -> Vec<Option<f64>> {
    let mut reference: BTreeMap<u32, &ImageSample> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.domain == target) {
        reference
            .entry(s.subject_id)
            .and_modify(|cur| {
                if s.sample_id < cur.sample_id {
                    *cur = s
                }
            })
            .or_insert(s);
    }
    inputs
        .iter()
        .zip(outputs)
        .map(|(inp, out)| {
            reference.get(&inp.subject_id).map(|r| {
                out.iter()
                    .zip(&r.pixels)
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum::<f64>()
                    / out.len() as f64
            })
        })
        .collect()
}

/// Shape of a single-row panel holding `n` image pairs.
pub fn panel_shape(image: ImageShape, n: usize) -> ImageShape {
    ImageShape::new(image.height, image.width * 2 * n, image.channels)
}
