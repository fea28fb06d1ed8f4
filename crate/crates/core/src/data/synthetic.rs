use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample, ImageShape};
use crate::error::{Error, Result};

/// Horizontal compression at |yaw| = 90 (fraction of width lost).
const MAX_COMPRESSION: f64 = 0.45;
/// Horizontal shear per unit height at yaw = +90.
const MAX_SHEAR: f64 = 0.35;
/// Perspective foreshortening coefficient at yaw = +90.
const MAX_PERSPECTIVE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub frontal_per_subject: usize,
    pub profile_per_subject: usize,
    pub image_size: ImageShape,
    pub seed: u64,
    pub yaw_range: (f64, f64),
    /// Kept small by default: a conditional discriminator that sees (x, x) as
    /// real separates it from (x, G(x)) by the noise alone once the noise
    /// exceeds what a half-resolution skip can reproduce.
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_subjects: 50,
            frontal_per_subject: 10,
            profile_per_subject: 4,
            image_size: ImageShape::new(64, 64, 1),
            seed: 0,
            yaw_range: (-90.0, 90.0),
            noise_std: 0.01,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        if self.frontal_per_subject == 0 && self.profile_per_subject == 0 {
            return Err(Error::Config(
                "each subject needs at least one frontal or profile sample".into(),
            ));
        }
        let (h, w, c) = self.image_size.hwc();
        let pow2 = |v: usize| v >= 16 && v.is_power_of_two();
        if !pow2(h) || !pow2(w) {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be powers of two no smaller than 16"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {c}")));
        }
        let (lo, hi) = self.yaw_range;
        if !(-90.0..=90.0).contains(&lo) || !(-90.0..=90.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "yaw_range ({lo}, {hi}) must be an ordered sub-range of [-90, 90]"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_subjects * (self.frontal_per_subject + self.profile_per_subject)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Inverse covariance entries of the rotated anisotropic Gaussian.
    a: f64,
    b: f64,
    c: f64,
    color: Vec<f64>,
}

/// Identity pattern: a fixed arrangement of 5 to 9 anisotropic Gaussian blobs
/// in normalised `[-1, 1]^2` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    blobs: Vec<Blob>,
}

impl Glyph {
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let count = rng.random_range(5..=9);
        let blobs = (0..count)
            .map(|_| {
                let cx = rng.random_range(-0.6..0.6);
                let cy = rng.random_range(-0.6..0.6);
                let sx: f64 = rng.random_range(0.08..0.25);
                let sy: f64 = rng.random_range(0.08..0.25);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let amp: f64 = rng.random_range(0.4..1.0);
                let (s, co) = theta.sin_cos();
                let (ix, iy) = (1.0 / (sx * sx), 1.0 / (sy * sy));
                let color = (0..channels)
                    .map(|_| {
                        if channels == 1 {
                            amp
                        } else {
                            amp * rng.random_range(0.3..1.0)
                        }
                    })
                    .collect();
                Blob {
                    cx,
                    cy,
                    a: co * co * ix + s * s * iy,
                    b: co * s * (ix - iy),
                    c: s * s * ix + co * co * iy,
                    color,
                }
            })
            .collect();
        Glyph { blobs }
    }

    fn intensity(&self, x: f64, y: f64, channel: usize) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let (dx, dy) = (x - b.cx, y - b.cy);
                let q = b.a * dx * dx + 2.0 * b.b * dx * dy + b.c * dy * dy;
                b.color[channel] * (-0.5 * q).exp()
            })
            .sum()
    }

    /// Renders the glyph seen at `yaw_deg` (0 = unwarped) into `H x W x C`
    /// pixels in `[0, 1]`, without noise.
    pub fn render(&self, shape: ImageShape, yaw_deg: f64) -> Vec<f64> {
        let (h, w, c) = shape.hwc();
        let t = yaw_deg / 90.0;
        let squeeze = 1.0 - MAX_COMPRESSION * t.abs();
        let mut out = Vec::with_capacity(h * w * c);
        for py in 0..h {
            let v = (py as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            for px in 0..w {
                let u = (px as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let depth = 1.0 + MAX_PERSPECTIVE * t * u;
                let xs = (u / squeeze + MAX_SHEAR * t * v) / depth;
                let ys = v / depth;
                for ch in 0..c {
                    out.push(self.intensity(xs, ys, ch).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 40) + sample_id);
    rng
}

/// Deterministic desk-scale paired dataset. Per subject, frontal samples come
/// first, then profiles; `sample_id` counts up in that order.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let per_subject = spec.frontal_per_subject + spec.profile_per_subject;
    let glyphs: Vec<Glyph> = (0..spec.n_subjects)
        .into_par_iter()
        .map(|s| Glyph::random(spec.image_size.channels, &mut subject_rng(spec.seed, s)))
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let samples = (0..spec.total_samples())
        .into_par_iter()
        .map(|i| {
            let subject = i / per_subject;
            let k = i % per_subject;
            let sample_id = i as u64;
            let mut rng = sample_rng(spec.seed, sample_id);
            let (domain, yaw_deg) = if k < spec.frontal_per_subject {
                (Domain::Frontal, 0.0)
            } else {
                let (lo, hi) = spec.yaw_range;
                let yaw = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                (Domain::Profile, yaw)
            };
            let mut pixels = glyphs[subject].render(spec.image_size, yaw_deg);
            if spec.noise_std > 0.0 {
                for p in &mut pixels {
                    *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            ImageSample {
                pixels: pixels.into_iter().map(|p| p as f32).collect(),
                shape: spec.image_size,
                subject_id: subject as u32,
                domain,
                yaw_deg,
                sample_id,
            }
        })
        .collect();
    Ok(samples)
}
