//! Differentiable architectures: two U-Net generators with shared topology,
//! two conditional patch discriminators, and the frozen perceptual network.

mod discriminator;
mod generator;
mod perceptual;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::layers::Param;
use crate::scalar::Scalar;

pub use discriminator::{Discriminator, DiscriminatorTrace, LEAKY_SLOPE};
pub use generator::{
    decoder_widths, encoder_widths, DecoderTrace, EncoderTrace, Generator, GeneratorTrace,
};
pub use perceptual::{PerceptualNet, PerceptualTrace, PERCEPTUAL_WIDTHS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: ImageShape,
    pub base_channels: usize,
    pub n_down: usize,
    pub embedding_dim: usize,
    /// Checkpoint directory whose `enc.*` / `embed.*` arrays replace the
    /// initial encoder weights of both generators.
    pub encoder_weights: Option<PathBuf>,
    /// Checkpoint directory whose `perceptual.*` arrays replace the seeded
    /// perceptual weights.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: ImageShape::new(64, 64, 1),
            base_channels: 32,
            n_down: 4,
            embedding_dim: 256,
            encoder_weights: None,
            perceptual_weights: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_size.hwc();
        if c == 0 || self.base_channels == 0 || self.n_down == 0 {
            return Err(Error::Config(
                "channels, base_channels and n_down must be positive".into(),
            ));
        }
        if self.n_down >= usize::BITS as usize
            || (h >> self.n_down) < 2
            || (w >> self.n_down) < 2
            || h % (1 << self.n_down) != 0
            || w % (1 << self.n_down) != 0
        {
            return Err(Error::Config(format!(
                "image {h}x{w} cannot be halved {} times down to at least 2x2",
                self.n_down
            )));
        }
        if h > 128 || w > 128 {
            return Err(Error::Config(format!(
                "image {h}x{w} exceeds the 128x128 limit"
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be divisible by 8 for the patch discriminator"
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Every network of the coupled model plus the training step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub gen_profile: Generator<T>,
    pub gen_frontal: Generator<T>,
    pub disc_profile: Discriminator<T>,
    pub disc_frontal: Discriminator<T>,
    pub perceptual: PerceptualNet<T>,
    pub step: u64,
}

/// Builds a model deterministically from `seed`. Generators and
/// discriminators draw from one stream, the frozen perceptual network from an
/// independent one.
pub fn init_model<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let image = config.image_size.hwc();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_profile = Generator::init(config, &mut rng);
    let gen_frontal = Generator::init(config, &mut rng);
    let disc_profile = Discriminator::init(image, config.base_channels, &mut rng);
    let disc_frontal = Discriminator::init(image, config.base_channels, &mut rng);
    let mut perc_rng = ChaCha8Rng::seed_from_u64(seed);
    perc_rng.set_stream(1);
    let perceptual = PerceptualNet::init(image, &mut perc_rng);
    let mut state = ModelState {
        config: config.clone(),
        seed,
        gen_profile,
        gen_frontal,
        disc_profile,
        disc_frontal,
        perceptual,
        step: 0,
    };
    if let Some(path) = &config.encoder_weights {
        state.import_encoder_weights(path)?;
    }
    if let Some(path) = &config.perceptual_weights {
        state.import_perceptual_weights(path)?;
    }
    Ok(state)
}

impl<T: Scalar> ModelState<T> {
    pub fn generator(&self, domain: crate::data::Domain) -> &Generator<T> {
        match domain {
            crate::data::Domain::Profile => &self.gen_profile,
            crate::data::Domain::Frontal => &self.gen_frontal,
        }
    }

    /// Every parameter array with its fully qualified name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        let groups: [(&str, Vec<(String, &Param<T>)>); 5] = [
            ("gen_profile", self.gen_profile.named_params()),
            ("gen_frontal", self.gen_frontal.named_params()),
            ("disc_profile", self.disc_profile.named_params()),
            ("disc_frontal", self.disc_frontal.named_params()),
            ("perceptual", self.perceptual.named_params()),
        ];
        for (prefix, params) in groups {
            for (name, p) in params {
                out.push((format!("{prefix}.{name}"), p));
            }
        }
        out
    }

    /// Same order as [`ModelState::named_params`].
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.gen_profile.params_mut();
        out.extend(self.gen_frontal.params_mut());
        out.extend(self.disc_profile.params_mut());
        out.extend(self.disc_frontal.params_mut());
        out.extend(self.perceptual.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// SHA-256 over the perceptual weights; constant for the life of a model.
    pub fn perceptual_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in self.perceptual.named_params() {
            buf.clear();
            for &v in &p.data {
                v.write_le(&mut buf);
            }
            h.update(name.as_bytes());
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// The same model in another precision (values rounded once).
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let config = GeneratorConfig {
            encoder_weights: None,
            perceptual_weights: None,
            ..self.config.clone()
        };
        let mut out = init_model::<U>(&config, self.seed).expect("config already validated");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(self.named_params()) {
            dst.shape.clone_from(&src.shape);
            dst.data = src.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        }
        out.config = self.config.clone();
        out.step = self.step;
        out
    }

    fn import_encoder_weights(&mut self, dir: &Path) -> Result<()> {
        let arrays = crate::trainer::read_named_arrays(dir)?;
        let mut used = 0;
        for (prefix, gen) in [
            ("gen_profile", &mut self.gen_profile),
            ("gen_frontal", &mut self.gen_frontal),
        ] {
            let names: Vec<String> = gen.named_params().into_iter().map(|(n, _)| n).collect();
            for (name, param) in names.iter().zip(gen.params_mut()) {
                if !(name.starts_with("enc.") || name.starts_with("embed.")) {
                    continue;
                }
                // Accept both full checkpoints and bare encoder exports.
                let found = arrays
                    .get(&format!("{prefix}.{name}"))
                    .or_else(|| arrays.get(name));
                if let Some((shape, values)) = found {
                    copy_external(name, param, shape, values)?;
                    used += 1;
                }
            }
        }
        if used == 0 {
            return Err(Error::Config(format!(
                "{} holds no enc.* or embed.* arrays",
                dir.display()
            )));
        }
        Ok(())
    }

    fn import_perceptual_weights(&mut self, dir: &Path) -> Result<()> {
        let arrays = crate::trainer::read_named_arrays(dir)?;
        let names: Vec<String> = self
            .perceptual
            .named_params()
            .into_iter()
            .map(|(n, _)| format!("perceptual.{n}"))
            .collect();
        for (name, param) in names.iter().zip(self.perceptual.params_mut()) {
            let (shape, values) = arrays
                .get(name)
                .ok_or_else(|| Error::MissingArray(name.clone()))?;
            copy_external(name, param, shape, values)?;
        }
        Ok(())
    }
}

fn copy_external<T: Scalar>(
    name: &str,
    param: &mut Param<T>,
    shape: &[usize],
    values: &[f64],
) -> Result<()> {
    if shape != param.shape.as_slice() {
        return Err(Error::Dimension(format!(
            "external array {name} has shape {shape:?}, expected {:?}",
            param.shape
        )));
    }
    for (d, &v) in param.data.iter_mut().zip(values) {
        *d = T::from_f64(v);
    }
    Ok(())
}
