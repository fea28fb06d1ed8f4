//! Paired-domain image data: sample types, the synthetic glyph generator,
//! on-disk ingestion, balanced pair sampling, and fold construction.

mod io;
mod pairs;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{export_dataset, load_dataset, load_dataset_with_shape, parse_yaw_suffix};
pub(crate) use io::save_png;
pub use pairs::{build_folds, sample_pair_batch, seeded_folds, Fold, FoldProtocol};
pub use synthetic::{generate_synthetic_dataset, DatasetSpec, Glyph};

/// Image dimensions `(height, width, channels)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn hwc(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl From<[usize; 3]> for ImageShape {
    fn from(v: [usize; 3]) -> Self {
        ImageShape::new(v[0], v[1], v[2])
    }
}

impl From<ImageShape> for [usize; 3] {
    fn from(s: ImageShape) -> Self {
        [s.height, s.width, s.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Profile,
    Frontal,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Profile => "profile",
            Domain::Frontal => "frontal",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Profile => Domain::Frontal,
            Domain::Frontal => Domain::Profile,
        }
    }
}

/// One image with its identity, domain tag and head yaw.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// Row-major `H x W x C`, every value in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub shape: ImageShape,
    pub subject_id: u32,
    pub domain: Domain,
    /// Degrees in `[-90, 90]`; always 0 for frontal samples.
    pub yaw_deg: f64,
    pub sample_id: u64,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.shape.pixel_count() {
            return Err(Error::Dimension(format!(
                "sample {} holds {} values for shape {:?}",
                self.sample_id,
                self.pixels.len(),
                self.shape
            )));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!(
                "sample {} has pixels outside [0, 1]",
                self.sample_id
            )));
        }
        if !(-90.0..=90.0).contains(&self.yaw_deg) {
            return Err(Error::Data(format!(
                "sample {} has yaw {} outside [-90, 90]",
                self.sample_id, self.yaw_deg
            )));
        }
        if self.domain == Domain::Frontal && self.yaw_deg != 0.0 {
            return Err(Error::Data(format!(
                "frontal sample {} has non-zero yaw",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// A (profile, frontal) pair; `label_y == 0` for genuine, `1` for impostor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairExample<'a> {
    pub profile: &'a ImageSample,
    pub frontal: &'a ImageSample,
    pub label_y: u8,
}

impl PairExample<'_> {
    pub fn is_genuine(&self) -> bool {
        self.label_y == 0
    }
}

/// Packs samples into a `[C, N, H, W]` batch.
pub fn to_batch<T: Scalar>(samples: &[&ImageSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot batch zero samples".into()))?;
    let (h, w, c) = first.shape.hwc();
    let n = samples.len();
    let plane = h * w;
    let mut t = Tensor::zeros(c, n, h, w);
    for (i, s) in samples.iter().enumerate() {
        if s.shape != first.shape {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, batch expects {:?}",
                s.sample_id, s.shape, first.shape
            )));
        }
        for p in 0..plane {
            for ch in 0..c {
                t.data[(ch * n + i) * plane + p] = T::from_f64(s.pixels[p * c + ch] as f64);
            }
        }
    }
    Ok(t)
}

/// Unpacks one batch entry into row-major `H x W x C` pixels.
pub fn from_batch<T: Scalar>(t: &Tensor<T>, index: usize) -> Vec<f32> {
    let plane = t.plane();
    let mut out = vec![0.0f32; plane * t.c];
    for ch in 0..t.c {
        let base = (ch * t.n + index) * plane;
        for p in 0..plane {
            out[p * t.c + ch] = t.data[base + p].as_f64() as f32;
        }
    }
    out
}

/// Distinct subject ids in ascending order.
pub fn subject_ids(samples: &[ImageSample]) -> Vec<u32> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.subject_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}
