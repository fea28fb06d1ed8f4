//! Threshold-sweep verification metrics and rank statistics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Operating points ordered by ascending threshold. The last threshold is
/// `+inf` (nothing accepted); acceptance means `score >= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub far: Vec<f64>,
    pub gar: Vec<f64>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// Sweeps every distinct score. Input is `(score, is_genuine)`.
pub fn roc_from_labeled(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let n_genuine = scores.iter().filter(|(_, g)| *g).count();
    let n_impostor = scores.len() - n_genuine;
    if n_genuine == 0 || n_impostor == 0 {
        return Err(Error::Protocol(format!(
            "ROC needs both classes, got {n_genuine} genuine and {n_impostor} impostor scores"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Walk from the highest score down, emitting one point per distinct value.
    let (mut acc_g, mut acc_i) = (0usize, 0usize);
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                acc_g += 1;
            } else {
                acc_i += 1;
            }
            i += 1;
        }
        points.push((
            t,
            acc_i as f64 / n_impostor as f64,
            acc_g as f64 / n_genuine as f64,
        ));
    }
    points.reverse();
    Ok(RocCurve {
        thresholds: points.iter().map(|p| p.0).collect(),
        far: points.iter().map(|p| p.1).collect(),
        gar: points.iter().map(|p| p.2).collect(),
        n_genuine,
        n_impostor,
    })
}

fn check(curve: &RocCurve) -> Result<()> {
    if curve.far.is_empty() || curve.far.len() != curve.gar.len() {
        return Err(Error::Protocol("empty or malformed ROC curve".into()));
    }
    Ok(())
}

/// Rate at which FAR equals FRR, linearly interpolated between the two
/// operating points that bracket the crossing.
pub fn eer(curve: &RocCurve) -> Result<f64> {
    check(curve)?;
    let diff = |i: usize| curve.far[i] - (1.0 - curve.gar[i]);
    let mut prev = 0;
    for i in 0..curve.far.len() {
        let d = diff(i);
        if d == 0.0 {
            return Ok(curve.far[i]);
        }
        if d < 0.0 {
            if i == 0 {
                return Ok((curve.far[0] + 1.0 - curve.gar[0]) / 2.0);
            }
            let d0 = diff(prev);
            let a = d0 / (d0 - d);
            return Ok(curve.far[prev] + a * (curve.far[i] - curve.far[prev]));
        }
        prev = i;
    }
    let last = curve.far.len() - 1;
    Ok((curve.far[last] + 1.0 - curve.gar[last]) / 2.0)
}

/// Area under the (FAR, GAR) polyline by the trapezoid rule.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    check(curve)?;
    let mut area = 0.0;
    for i in 1..curve.far.len() {
        let dx = curve.far[i - 1] - curve.far[i];
        area += dx * (curve.gar[i - 1] + curve.gar[i]) / 2.0;
    }
    Ok(area)
}

/// Highest GAR among operating points with `far <= target`, 0 if none.
pub fn gar_at_far(curve: &RocCurve, target: f64) -> Result<f64> {
    check(curve)?;
    Ok(curve
        .far
        .iter()
        .zip(&curve.gar)
        .filter(|(f, _)| **f <= target)
        .map(|(_, g)| *g)
        .fold(0.0, f64::max))
}

/// Best verification accuracy over all operating points.
pub fn best_accuracy(curve: &RocCurve) -> Result<f64> {
    check(curve)?;
    let (ng, ni) = (curve.n_genuine as f64, curve.n_impostor as f64);
    Ok(curve
        .far
        .iter()
        .zip(&curve.gar)
        .map(|(f, g)| (g * ng + (1.0 - f) * ni) / (ng + ni))
        .fold(0.0, f64::max))
}

/// 1-based rank of `true_subject` when the gallery is sorted by descending
/// score, ties broken by ascending subject id.
pub fn rank_of(gallery_scores: &[(u32, f64)], true_subject: u32) -> Result<usize> {
    let &(_, own) = gallery_scores
        .iter()
        .find(|(s, _)| *s == true_subject)
        .ok_or_else(|| Error::Protocol(format!("subject {true_subject} is not in the gallery")))?;
    let ahead = gallery_scores
        .iter()
        .filter(|(s, v)| *v > own || (*v == own && *s < true_subject))
        .count();
    Ok(ahead + 1)
}

/// Fraction of ranks `<= k` for each `k`.
pub fn rank_k_from_ranks(ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            let rate = if ranks.is_empty() {
                0.0
            } else {
                hits as f64 / ranks.len() as f64
            };
            (k, rate)
        })
        .collect()
}

/// Cumulative match characteristic for k = 1..=gallery_size.
pub fn cmc_from_ranks(ranks: &[usize], gallery_size: usize) -> Vec<f64> {
    let ks: Vec<usize> = (1..=gallery_size).collect();
    rank_k_from_ranks(ranks, &ks).into_values().collect()
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
