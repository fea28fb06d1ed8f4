//! Dataset directory layout: `<root>/<subject_id>/{frontal,profile}/<name>[_y<±deg>].png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};

use super::{Domain, ImageSample, ImageShape};
use crate::error::{Error, Result};

/// Yaw encoded in a file stem suffix `_y<±deg>` (e.g. `img_y45`, `a_y-30.5`).
pub fn parse_yaw_suffix(stem: &str) -> Option<f64> {
    let pos = stem.rfind("_y")?;
    let tail = &stem[pos + 2..];
    let digits = tail.strip_prefix(['+', '-']).unwrap_or(tail);
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    tail.parse::<f64>().ok()
}

fn read_dir_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads every image under `root`; the shape is taken from the first image.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    load_dataset_with_shape(root, None)
}

/// Loads every image under `root`, requiring all to match `expected` (or the
/// first image when `None`). Samples are ordered by subject, then domain
/// (frontal first), then file name; `sample_id` follows that order.
pub fn load_dataset_with_shape(
    root: &Path,
    expected: Option<ImageShape>,
) -> Result<Vec<ImageSample>> {
    if !root.is_dir() {
        return Err(Error::ingestion(root, "dataset root is not a directory"));
    }
    let mut subjects = Vec::new();
    for entry in read_dir_sorted(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let id: u32 = name
            .parse()
            .map_err(|_| Error::ingestion(&entry, "subject directory name is not an integer"))?;
        subjects.push((id, entry));
    }
    subjects.sort_by_key(|(id, _)| *id);

    let mut shape = expected;
    let mut out = Vec::new();
    for (subject_id, dir) in subjects {
        for entry in read_dir_sorted(&dir)? {
            let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if entry.is_dir() && name != "frontal" && name != "profile" {
                return Err(Error::ingestion(
                    &entry,
                    "expected only `frontal` and `profile` subdirectories",
                ));
            }
        }
        for domain in [Domain::Frontal, Domain::Profile] {
            let ddir = dir.join(domain.dir_name());
            if !ddir.exists() {
                continue;
            }
            for file in read_dir_sorted(&ddir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("png") {
                    return Err(Error::ingestion(&file, "expected only .png files"));
                }
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let yaw_deg = match domain {
                    Domain::Frontal => 0.0,
                    Domain::Profile => parse_yaw_suffix(stem).unwrap_or(90.0),
                };
                if !(-90.0..=90.0).contains(&yaw_deg) {
                    return Err(Error::ingestion(&file, "yaw suffix outside [-90, 90]"));
                }
                let img = image::open(&file).map_err(|e| Error::ingestion(&file, e.to_string()))?;
                let channels = match shape {
                    Some(s) => s.channels,
                    None if matches!(img.color(), ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16) => 1,
                    None => 3,
                };
                let found = ImageShape::new(img.height() as usize, img.width() as usize, channels);
                let s = *shape.get_or_insert(found);
                if s != found {
                    return Err(Error::ingestion(
                        &file,
                        format!(
                            "image is {}x{}, dataset expects {}x{}",
                            found.height, found.width, s.height, s.width
                        ),
                    ));
                }
                let pixels: Vec<f32> = match channels {
                    1 => img.to_luma8().into_raw(),
                    3 => img.to_rgb8().into_raw(),
                    c => {
                        return Err(Error::ingestion(
                            &file,
                            format!("unsupported channel count {c}"),
                        ))
                    }
                }
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect();
                out.push(ImageSample {
                    pixels,
                    shape: s,
                    subject_id,
                    domain,
                    yaw_deg,
                    sample_id: out.len() as u64,
                });
            }
        }
    }
    if out.is_empty() {
        log::warn!("no images found under {}", root.display());
    }
    Ok(out)
}

pub(crate) fn to_png_image(pixels: &[f32], shape: ImageShape) -> Result<DynamicImage> {
    let (h, w, c) = shape.hwc();
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let bad = || Error::Dimension(format!("{} values do not form {h}x{w}x{c}", pixels.len()));
    match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .map(DynamicImage::ImageLuma8)
            .ok_or_else(bad),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .map(DynamicImage::ImageRgb8)
            .ok_or_else(bad),
        _ => Err(Error::Dimension(format!("cannot write {c}-channel PNG"))),
    }
}

pub(crate) fn save_png(path: &Path, pixels: &[f32], shape: ImageShape) -> Result<()> {
    to_png_image(pixels, shape)?
        .save(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
}

/// Writes samples in the dataset directory layout. Profile file names carry
/// the yaw suffix; frontal names do not.
pub fn export_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    for s in samples {
        let dir = root
            .join(format!("{:03}", s.subject_id))
            .join(s.domain.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = match s.domain {
            Domain::Frontal => format!("s{:06}.png", s.sample_id),
            Domain::Profile => format!("s{:06}_y{:+.3}.png", s.sample_id, s.yaw_deg),
        };
        save_png(&dir.join(name), &s.pixels, s.shape)?;
    }
    Ok(())
}
