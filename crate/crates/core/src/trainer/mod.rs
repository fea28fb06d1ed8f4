//! Coupled adversarial training: one discriminator step then one generator
//! step per balanced pair batch.
//!
//! Determinism: every kernel runs single-threaded with a fixed summation
//! order, batches are drawn from a per-step RNG stream, and perceptual target
//! features are computed one image at a time, so a run is a pure function of
//! (seed, data, config, precision) on a given build.

mod ablation;
mod checkpoint;
mod log;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_pair_batch, to_batch, ImageSample, PairExample};
use crate::error::{Error, Result};
use crate::losses::{
    coupling_loss_grad, discriminator_loss_grad, feature_l1_grad, generator_adv_loss_grad,
    l2_batch_grad, total_objective, LossBreakdown, LossConfig, LossTerms,
};
use crate::networks::{
    init_model, Discriminator, Generator, GeneratorConfig, GeneratorTrace, ModelState,
    PerceptualNet,
};
use crate::optim::{Adam, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ablation::{run_ablation_suite, split_digest, AblationEntry, AblationSuite};
pub use checkpoint::{
    checkpoint_dir_name, load_checkpoint, read_manifest, read_named_arrays, save_checkpoint, ArrayEntry,
    CheckpointManifest, CHECKPOINT_VERSION,
};
pub use log::{TrainLog, TrainLogRecord, TRAIN_LOG_HEADER};

/// Which loss terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Coupling + L2 only.
    CplL2,
    /// Coupling + L2 + adversarial.
    CplL2Gan,
    Full,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 3] = [Self::CplL2, Self::CplL2Gan, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::CplL2 => "cpl_l2",
            Self::CplL2Gan => "cpl_l2_gan",
            Self::Full => "full",
        }
    }

    pub fn uses_gan(self) -> bool {
        self != Self::CplL2
    }

    pub fn uses_perceptual(self) -> bool {
        self == Self::Full
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (cpl_l2, cpl_l2_gan, full)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Lives in its own `[loss]` section of run configs.
    #[serde(skip)]
    pub loss_config: LossConfig,
    pub ablation_preset: AblationPreset,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Global gradient-norm clip per network; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 4e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 2000,
            seed: 0,
            loss_config: LossConfig::default(),
            ablation_preset: AblationPreset::Full,
            checkpoint_every: 500,
            log_every: 10,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "checkpoint_every and log_every must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.loss_config.validate()
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: self.grad_clip,
        }
    }
}

/// Adam moments for the four trainable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerStates<T> {
    pub gen_profile: AdamState<T>,
    pub gen_frontal: AdamState<T>,
    pub disc_profile: AdamState<T>,
    pub disc_frontal: AdamState<T>,
}

impl<T: Scalar> OptimizerStates<T> {
    pub fn new(state: &ModelState<T>) -> Self {
        let gen = |g: &Generator<T>| AdamState::for_params(g.named_params().into_iter().map(|(_, p)| p));
        let disc =
            |d: &Discriminator<T>| AdamState::for_params(d.named_params().into_iter().map(|(_, p)| p));
        OptimizerStates {
            gen_profile: gen(&state.gen_profile),
            gen_frontal: gen(&state.gen_frontal),
            disc_profile: disc(&state.disc_profile),
            disc_frontal: disc(&state.disc_frontal),
        }
    }

    pub(crate) fn groups(&self) -> [(&'static str, &AdamState<T>); 4] {
        [
            ("gen_profile", &self.gen_profile),
            ("gen_frontal", &self.gen_frontal),
            ("disc_profile", &self.disc_profile),
            ("disc_frontal", &self.disc_frontal),
        ]
    }

    pub(crate) fn groups_mut(&mut self) -> [(&'static str, &mut AdamState<T>); 4] {
        [
            ("gen_profile", &mut self.gen_profile),
            ("gen_frontal", &mut self.gen_frontal),
            ("disc_profile", &mut self.disc_profile),
            ("disc_frontal", &mut self.disc_frontal),
        ]
    }
}

/// Perceptual features of real images, keyed by `sample_id`. Each entry is
/// computed from a single-image batch so values never depend on batch
/// composition.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache<T> {
    features: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new() -> Self {
        FeatureCache {
            features: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn batch(&mut self, perc: &PerceptualNet<T>, samples: &[&ImageSample]) -> Result<Tensor<T>> {
        for s in samples {
            if !self.features.contains_key(&s.sample_id) {
                let f = perc.features(&to_batch::<T>(&[s])?)?;
                self.features.insert(s.sample_id, f);
            }
        }
        let parts: Vec<&Tensor<T>> = samples.iter().map(|s| &self.features[&s.sample_id]).collect();
        Tensor::stack(&parts)
    }
}

fn split_batch<'a>(batch: &[PairExample<'a>]) -> Result<(Vec<&'a ImageSample>, Vec<&'a ImageSample>, Vec<u8>)> {
    let genuine = batch.iter().filter(|p| p.is_genuine()).count();
    if batch.is_empty() || genuine * 2 != batch.len() {
        return Err(Error::Protocol(format!(
            "unbalanced batch: {genuine} genuine of {} pairs",
            batch.len()
        )));
    }
    let profiles = batch.iter().map(|p| p.profile).collect();
    let frontals = batch.iter().map(|p| p.frontal).collect();
    let labels = batch.iter().map(|p| p.label_y).collect();
    Ok((profiles, frontals, labels))
}

/// Gradients of both generators.
#[derive(Clone, Debug)]
pub struct GeneratorGrads<T> {
    pub profile: Generator<T>,
    pub frontal: Generator<T>,
}

fn forward_both<T: Scalar>(
    state: &ModelState<T>,
    profiles: &[&ImageSample],
    frontals: &[&ImageSample],
) -> Result<([Tensor<T>; 2], [GeneratorTrace<T>; 2])> {
    let xp = to_batch::<T>(profiles)?;
    let xf = to_batch::<T>(frontals)?;
    let tp = state.gen_profile.forward(&xp)?;
    let tf = state.gen_frontal.forward(&xf)?;
    Ok(([xp, xf], [tp, tf]))
}

fn logits_tensor<T: Scalar>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor {
        data,
        ..like.zeros_like()
    }
}

/// Discriminator loss for one domain with parameter gradients.
fn discriminator_grad<T: Scalar>(
    disc: &Discriminator<T>,
    x: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(f64, Discriminator<T>)> {
    let real_tr = disc.forward(x, x)?;
    let fake_tr = disc.forward(x, fake)?;
    let (loss, d_real, d_fake) = discriminator_loss_grad(&real_tr.logits.data, &fake_tr.logits.data)?;
    let mut grad = disc.zeros_like();
    disc.backward(&real_tr, &logits_tensor(&real_tr.logits, d_real), Some(&mut grad), false);
    disc.backward(&fake_tr, &logits_tensor(&fake_tr.logits, d_fake), Some(&mut grad), false);
    Ok((loss, grad))
}

/// Total generator objective (preset-masked) for precomputed forward traces,
/// with gradients for both generators. Discriminators and the perceptual
/// network are held fixed.
fn generator_objective_from<T: Scalar>(
    state: &ModelState<T>,
    x: &[Tensor<T>; 2],
    traces: &[GeneratorTrace<T>; 2],
    labels: &[u8],
    perc_targets: Option<[Tensor<T>; 2]>,
    config: &TrainConfig,
) -> Result<(LossTerms, GeneratorGrads<T>)> {
    let lc = &config.loss_config;
    let preset = config.ablation_preset;
    let (l_cpl, dz_p, dz_f) = coupling_loss_grad(
        traces[0].embedding(),
        traces[1].embedding(),
        labels,
        lc.margin_m,
        lc.contrastive_form,
    )?;
    let gens = [&state.gen_profile, &state.gen_frontal];
    let discs = [&state.disc_profile, &state.disc_frontal];
    let dz = [dz_p, dz_f];
    let mut gan = [0.0; 2];
    let mut l2 = [0.0; 2];
    let mut perc = [0.0; 2];
    let mut grads = Vec::with_capacity(2);
    for k in 0..2 {
        let out = traces[k].output();
        let (l, g2) = l2_batch_grad(out, &x[k])?;
        l2[k] = l;
        let mut d_out = g2;
        d_out.scale(T::from_f64(lc.lambda_3));
        if preset.uses_gan() {
            let tr = discs[k].forward(&x[k], out)?;
            let (l, mut dl) = generator_adv_loss_grad(&tr.logits.data, lc.gan_form)?;
            gan[k] = l;
            let w = T::from_f64(lc.lambda_1);
            dl.iter_mut().for_each(|v| *v *= w);
            let d_cand = discs[k]
                .backward(&tr, &logits_tensor(&tr.logits, dl), None, true)
                .expect("candidate gradient requested");
            d_out.add_assign(&d_cand);
        }
        if let Some(targets) = &perc_targets {
            let tr = state.perceptual.forward(out)?;
            let (l, mut gf) = feature_l1_grad(tr.features(), &targets[k])?;
            perc[k] = l;
            gf.scale(T::from_f64(lc.lambda_2));
            d_out.add_assign(&state.perceptual.backward_input(&tr, &gf));
        }
        let mut g = gens[k].zeros_like();
        gens[k].backward(&traces[k], Some(&d_out), Some(&dz[k]), &mut g, false);
        grads.push(g);
    }
    let frontal = grads.pop().expect("two domains");
    let profile = grads.pop().expect("two domains");
    let terms = LossTerms {
        l_cpl,
        l_gan_profile: gan[0],
        l_gan_frontal: gan[1],
        l_l2: l2[0] + l2[1],
        l_perceptual: perc[0] + perc[1],
        d_loss_profile: 0.0,
        d_loss_frontal: 0.0,
    };
    Ok((terms, GeneratorGrads { profile, frontal }))
}

/// The preset-masked total objective on `batch` with analytic gradients for
/// both generators, without updating anything.
pub fn generator_objective<T: Scalar>(
    state: &ModelState<T>,
    batch: &[PairExample],
    config: &TrainConfig,
) -> Result<(LossBreakdown, GeneratorGrads<T>)> {
    let (profiles, frontals, labels) = split_batch(batch)?;
    let (x, traces) = forward_both(state, &profiles, &frontals)?;
    let targets = if config.ablation_preset.uses_perceptual() {
        Some([
            state.perceptual.features(&x[0])?,
            state.perceptual.features(&x[1])?,
        ])
    } else {
        None
    };
    let (terms, grads) = generator_objective_from(state, &x, &traces, &labels, targets, config)?;
    Ok((total_objective(terms, &config.loss_config)?, grads))
}

/// One discriminator update followed by one generator update.
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    opt: &mut OptimizerStates<T>,
    cache: &mut FeatureCache<T>,
    batch: &[PairExample],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (profiles, frontals, labels) = split_batch(batch)?;
    let adam = config.adam();
    // Generator weights are untouched by the discriminator update, so these
    // traces are exactly the generator-step forward passes as well.
    let (x, traces) = forward_both(state, &profiles, &frontals)?;

    let mut d_loss = [0.0; 2];
    if config.ablation_preset.uses_gan() {
        let (lp, gp) = discriminator_grad(&state.disc_profile, &x[0], traces[0].output())?;
        let (lf, gf) = discriminator_grad(&state.disc_frontal, &x[1], traces[1].output())?;
        d_loss = [lp, lf];
        if !(lp.is_finite() && lf.is_finite()) {
            return Err(non_finite(state.step, &format!("d_loss {lp} / {lf}")));
        }
        adam.step(state.disc_profile.params_mut(), &param_refs_disc(&gp), &mut opt.disc_profile);
        adam.step(state.disc_frontal.params_mut(), &param_refs_disc(&gf), &mut opt.disc_frontal);
    }

    let targets = if config.ablation_preset.uses_perceptual() {
        Some([
            cache.batch(&state.perceptual, &profiles)?,
            cache.batch(&state.perceptual, &frontals)?,
        ])
    } else {
        None
    };
    let (mut terms, grads) =
        generator_objective_from(state, &x, &traces, &labels, targets, config)?;
    terms.d_loss_profile = d_loss[0];
    terms.d_loss_frontal = d_loss[1];
    let breakdown = total_objective(terms, &config.loss_config)
        .map_err(|e| non_finite(state.step, &e.to_string()))?;
    if !breakdown.all_finite() {
        return Err(non_finite(state.step, &format!("{breakdown:?}")));
    }
    adam.step(state.gen_profile.params_mut(), &param_refs_gen(&grads.profile), &mut opt.gen_profile);
    adam.step(state.gen_frontal.params_mut(), &param_refs_gen(&grads.frontal), &mut opt.gen_frontal);
    state.step += 1;
    Ok(breakdown)
}

fn non_finite(step: u64, detail: &str) -> Error {
    Error::Numeric(format!("non-finite loss at step {step}: {detail}"))
}

fn param_refs_gen<T: Scalar>(g: &Generator<T>) -> Vec<&crate::layers::Param<T>> {
    g.named_params().into_iter().map(|(_, p)| p).collect()
}

fn param_refs_disc<T: Scalar>(d: &Discriminator<T>) -> Vec<&crate::layers::Param<T>> {
    d.named_params().into_iter().map(|(_, p)| p).collect()
}

/// RNG for the batch drawn at `step`; independent of every other step so a
/// resumed run needs nothing beyond the step counter.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    rng.set_stream(step);
    rng
}

/// Result of [`Trainer::run`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainLogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// A training run: model, optimizer moments and the feature cache.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub state: ModelState<T>,
    pub optimizer: OptimizerStates<T>,
    pub config: TrainConfig,
    cache: FeatureCache<T>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialised from `config.seed`.
    pub fn new(model: &GeneratorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = init_model::<T>(model, config.seed)?;
        let optimizer = OptimizerStates::new(&state);
        Ok(Self::from_parts(state, optimizer, config))
    }

    pub fn from_parts(state: ModelState<T>, optimizer: OptimizerStates<T>, config: TrainConfig) -> Self {
        Trainer {
            state,
            optimizer,
            config,
            cache: FeatureCache::new(),
        }
    }

    pub fn resume(checkpoint: &Path) -> Result<Self> {
        let (state, optimizer, config) = load_checkpoint::<T>(checkpoint)?;
        Ok(Self::from_parts(state, optimizer, config))
    }

    /// Draws the batch for the current step and trains on it.
    pub fn step(&mut self, samples: &[ImageSample]) -> Result<LossBreakdown> {
        let mut rng = batch_rng(self.config.seed, self.state.step);
        let batch = sample_pair_batch(samples, self.config.batch_size, &mut rng)?;
        train_step(&mut self.state, &mut self.optimizer, &mut self.cache, &batch, &self.config)
    }

    /// Trains until `config.max_steps`. With `out_dir`, log rows are appended
    /// to `train_log.csv` and checkpoints written under `checkpoints/`.
    pub fn run(&mut self, samples: &[ImageSample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let mut log = match out_dir {
            Some(dir) => Some(TrainLog::open(&dir.join("train_log.csv"))?),
            None => None,
        };
        let mut records = Vec::new();
        let mut checkpoints = Vec::new();
        let started = Instant::now();
        let half = (self.config.batch_size / 2) as u64;
        while self.state.step < self.config.max_steps {
            let breakdown = match self.step(samples) {
                Ok(b) => b,
                Err(e @ Error::Numeric(_)) => {
                    ::log::error!("{e}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let step = self.state.step;
            if step % self.config.log_every == 0 || step == self.config.max_steps {
                let record = TrainLogRecord {
                    step,
                    breakdown,
                    seconds: started.elapsed().as_secs_f64(),
                    n_genuine: half,
                    n_impostor: half,
                };
                ::log::info!(
                    "step {step}: total {:.5} l_cpl {:.5}",
                    breakdown.total,
                    breakdown.l_cpl
                );
                if let Some(log) = &mut log {
                    log.append(&record)?;
                }
                records.push(record);
            }
            if let Some(dir) = out_dir {
                if step % self.config.checkpoint_every == 0 || step == self.config.max_steps {
                    checkpoints.push(self.save(dir)?);
                }
            }
        }
        Ok(TrainOutcome {
            records,
            checkpoints,
        })
    }

    /// Writes `checkpoints/step_NNNNNN` under `run_dir`.
    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir
            .join("checkpoints")
            .join(checkpoint_dir_name(self.state.step));
        save_checkpoint(&self.state, &self.optimizer, &self.config, &path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests;
