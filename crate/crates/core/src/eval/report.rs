//! CSV and PNG artefacts of the evaluation protocols.

use std::collections::BTreeMap;
use std::path::Path;

use super::{panel_shape, FoldSummary, RocCurve, YawBin};
use crate::data::{ImageSample, ImageShape};
use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `fold,metric,value`: one block per report (fold index, or `all` when the
/// report has none), then `mean` and `std` blocks when there are several.
pub fn write_eval_report(path: &Path, summary: &FoldSummary) -> Result<()> {
    let mut rows = Vec::new();
    for r in &summary.reports {
        let fold = r.fold_id.map_or_else(|| "all".to_string(), |f| f.to_string());
        for (m, v) in r.metrics() {
            rows.push(vec![fold.clone(), m, v.to_string()]);
        }
    }
    if summary.reports.len() > 1 {
        for (label, values) in [("mean", &summary.mean), ("std", &summary.std)] {
            for (m, v) in values {
                rows.push(vec![label.to_string(), m.clone(), v.to_string()]);
            }
        }
    }
    write_rows(path, &["fold", "metric", "value"], rows)
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let rows = (0..curve.far.len()).map(|i| {
        vec![
            curve.thresholds[i].to_string(),
            curve.far[i].to_string(),
            curve.gar[i].to_string(),
        ]
    });
    write_rows(path, &["threshold", "far", "gar"], rows)
}

/// One row per edge; bins without probes get an empty `rank1` and 0 probes.
pub fn write_yaw_csv(path: &Path, bins: &BTreeMap<u32, YawBin>, edges: &[u32]) -> Result<()> {
    let rows = edges.iter().map(|e| match bins.get(e) {
        Some(b) => vec![e.to_string(), b.rank1.to_string(), b.n_probes.to_string()],
        None => vec![e.to_string(), String::new(), "0".to_string()],
    });
    write_rows(path, &["bin_deg", "rank1", "n_probes"], rows)
}

/// Rows of `(preset, eer, auc, gar@0.01)`.
pub fn write_ablation_csv(path: &Path, rows: &[(String, f64, f64, f64)]) -> Result<()> {
    let rows = rows.iter().map(|(p, e, a, g)| {
        vec![p.clone(), e.to_string(), a.to_string(), g.to_string()]
    });
    write_rows(path, &["preset", "eer", "auc", "gar@0.01"], rows)
}

pub fn write_recon_mse(path: &Path, inputs: &[&ImageSample], errors: &[Option<f64>]) -> Result<()> {
    let rows = inputs.iter().zip(errors).map(|(s, e)| {
        vec![
            s.sample_id.to_string(),
            s.subject_id.to_string(),
            e.map_or_else(String::new, |v| v.to_string()),
        ]
    });
    write_rows(path, &["sample_id", "subject_id", "mse"], rows)
}

/// Single-row panel: inputs in odd columns (1st, 3rd, ...) and their
/// reconstructions in the even columns right after them.
pub fn reconstruction_panel(
    inputs: &[&ImageSample],
    outputs: &[Vec<f32>],
) -> Result<(Vec<f32>, ImageShape)> {
    let shape = inputs
        .first()
        .map(|s| s.shape)
        .ok_or_else(|| Error::Data("no images for the panel".into()))?;
    if inputs.len() != outputs.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} reconstructions",
            inputs.len(),
            outputs.len()
        )));
    }
    let (h, w, c) = shape.hwc();
    let panel = panel_shape(shape, inputs.len());
    let pw = panel.width;
    let mut pixels = vec![0.0f32; panel.pixel_count()];
    for (k, (inp, out)) in inputs.iter().zip(outputs).enumerate() {
        if inp.shape != shape || out.len() != shape.pixel_count() {
            return Err(Error::Dimension("panel images differ in shape".into()));
        }
        for (col, img) in [(2 * k, &inp.pixels), (2 * k + 1, out)] {
            for y in 0..h {
                let src = &img[y * w * c..(y + 1) * w * c];
                let dst = (y * pw + col * w) * c;
                pixels[dst..dst + w * c].copy_from_slice(src);
            }
        }
    }
    Ok((pixels, panel))
}

pub fn save_panel(path: &Path, inputs: &[&ImageSample], outputs: &[Vec<f32>]) -> Result<()> {
    let (pixels, shape) = reconstruction_panel(inputs, outputs)?;
    crate::data::save_png(path, &pixels, shape)
}

/// Header and rows of a CSV file.
pub fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| csv_err(path, e))
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}
