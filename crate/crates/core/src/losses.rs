//! Loss terms of the coupled objective, each with its analytic gradient.
//!
//! Scalar results are reported as `f64` regardless of the arithmetic width of
//! the networks; gradients stay in the network precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::PerceptualNet;
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// Generator minimises `log(1 - D(G(x)))`.
    Minimax,
    /// Generator minimises `-log D(G(x))`.
    NonSaturating,
}

/// Impostor term of the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `½ max(0, m - D)²`
    SquaredHinge,
    /// `½ max(0, m - D²)`
    HingeOfSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin_m: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub gan_form: GanForm,
    pub contrastive_form: ContrastiveForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_m: 1.0,
            lambda_1: 1.0,
            lambda_2: 0.25,
            lambda_3: 0.25,
            gan_form: GanForm::NonSaturating,
            contrastive_form: ContrastiveForm::SquaredHinge,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_m > 0.0 && self.margin_m.is_finite()) {
            return Err(Error::Config(format!(
                "margin_m must be positive, got {}",
                self.margin_m
            )));
        }
        for (name, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values for one batch plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cpl: f64,
    pub l_gan_profile: f64,
    pub l_gan_frontal: f64,
    pub l_l2: f64,
    pub l_perceptual: f64,
    pub total: f64,
    pub d_loss_profile: f64,
    pub d_loss_frontal: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.l_cpl,
            self.l_gan_profile,
            self.l_gan_frontal,
            self.l_l2,
            self.l_perceptual,
            self.total,
            self.d_loss_profile,
            self.d_loss_frontal,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Unweighted loss terms fed to [`total_objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_cpl: f64,
    pub l_gan_profile: f64,
    pub l_gan_frontal: f64,
    pub l_l2: f64,
    pub l_perceptual: f64,
    pub d_loss_profile: f64,
    pub d_loss_frontal: f64,
}

/// `total = l_cpl + λ1·(gan_pr + gan_fr) + λ2·perceptual + λ3·l2`.
pub fn total_objective(terms: LossTerms, config: &LossConfig) -> Result<LossBreakdown> {
    let values = [
        terms.l_cpl,
        terms.l_gan_profile,
        terms.l_gan_frontal,
        terms.l_l2,
        terms.l_perceptual,
        terms.d_loss_profile,
        terms.d_loss_frontal,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss term in {terms:?}")));
    }
    let total = terms.l_cpl
        + config.lambda_1 * (terms.l_gan_profile + terms.l_gan_frontal)
        + config.lambda_2 * terms.l_perceptual
        + config.lambda_3 * terms.l_l2;
    Ok(LossBreakdown {
        l_cpl: terms.l_cpl,
        l_gan_profile: terms.l_gan_profile,
        l_gan_frontal: terms.l_gan_frontal,
        l_l2: terms.l_l2,
        l_perceptual: terms.l_perceptual,
        total,
        d_loss_profile: terms.d_loss_profile,
        d_loss_frontal: terms.d_loss_frontal,
    })
}

/// Euclidean distance `‖z1 - z2‖₂`.
pub fn embedding_distance<T: Scalar>(z1: &[T], z2: &[T]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Dimension(format!(
            "embeddings of length {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    Ok(z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn check_label(label_y: u8) -> Result<()> {
    if label_y > 1 {
        return Err(Error::Data(format!("label_y must be 0 or 1, got {label_y}")));
    }
    Ok(())
}

/// Contrastive loss of one pair and its gradient with respect to `z1`
/// (the gradient with respect to `z2` is the negation).
pub fn contrastive_loss_grad<T: Scalar>(
    z1: &[T],
    z2: &[T],
    label_y: u8,
    margin_m: f64,
    form: ContrastiveForm,
) -> Result<(f64, Vec<f64>)> {
    check_label(label_y)?;
    let dist = embedding_distance(z1, z2)?;
    let diff: Vec<f64> = z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| a.as_f64() - b.as_f64())
        .collect();
    if label_y == 0 {
        return Ok((0.5 * dist * dist, diff));
    }
    let zeros = || vec![0.0; diff.len()];
    match form {
        ContrastiveForm::SquaredHinge => {
            if dist >= margin_m {
                return Ok((0.0, zeros()));
            }
            let gap = margin_m - dist;
            // d/dz1 ½(m - D)² = -(m - D)·(z1 - z2)/D; subgradient 0 at D = 0.
            let grad = if dist > 0.0 {
                diff.iter().map(|d| -gap * d / dist).collect()
            } else {
                zeros()
            };
            Ok((0.5 * gap * gap, grad))
        }
        ContrastiveForm::HingeOfSquare => {
            let sq = dist * dist;
            if sq >= margin_m {
                return Ok((0.0, zeros()));
            }
            Ok((0.5 * (margin_m - sq), diff.iter().map(|d| -d).collect()))
        }
    }
}

pub fn contrastive_loss<T: Scalar>(
    z1: &[T],
    z2: &[T],
    label_y: u8,
    margin_m: f64,
    form: ContrastiveForm,
) -> Result<f64> {
    contrastive_loss_grad(z1, z2, label_y, margin_m, form).map(|(l, _)| l)
}

/// Mean contrastive loss over a batch of `(z1, z2, label)` triples.
pub fn coupling_loss<T: Scalar>(
    batch: &[(&[T], &[T], u8)],
    margin_m: f64,
    form: ContrastiveForm,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("coupling loss over an empty batch".into()));
    }
    let mut sum = 0.0;
    for (z1, z2, y) in batch {
        sum += contrastive_loss(z1, z2, *y, margin_m, form)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Batched coupling loss over `[d, N]` embedding columns with gradients for
/// both embedding tensors.
pub fn coupling_loss_grad<T: Scalar>(
    z_profile: &Tensor<T>,
    z_frontal: &Tensor<T>,
    labels: &[u8],
    margin_m: f64,
    form: ContrastiveForm,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let n = z_profile.n;
    let d = z_profile.c * z_profile.h * z_profile.w;
    if z_frontal.shape() != z_profile.shape() || labels.len() != n {
        return Err(Error::Dimension(format!(
            "coupling over {:?} / {:?} with {} labels",
            z_profile.shape(),
            z_frontal.shape(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("coupling loss over an empty batch".into()));
    }
    let column = |t: &Tensor<T>, j: usize| -> Vec<T> { (0..d).map(|k| t.data[k * n + j]).collect() };
    let mut dz_p = z_profile.zeros_like();
    let mut dz_f = z_frontal.zeros_like();
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let (l, g) = contrastive_loss_grad(
            &column(z_profile, j),
            &column(z_frontal, j),
            y,
            margin_m,
            form,
        )?;
        sum += l;
        for (k, gk) in g.iter().enumerate() {
            dz_p.data[k * n + j] = T::from_f64(gk * inv_n);
            dz_f.data[k * n + j] = T::from_f64(-gk * inv_n);
        }
    }
    Ok((sum * inv_n, dz_p, dz_f))
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

fn check_logits<T: Scalar>(logits: &[T]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Numeric("empty logit grid".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite discriminator logit".into()));
    }
    Ok(())
}

/// Discriminator loss `-mean log σ(real) - mean log(1 - σ(fake))` and its
/// gradients with respect to both logit grids.
pub fn discriminator_loss_grad<T: Scalar>(
    real: &[T],
    fake: &[T],
) -> Result<(f64, Vec<T>, Vec<T>)> {
    check_logits(real)?;
    check_logits(fake)?;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let mut loss = 0.0;
    let mut d_real = Vec::with_capacity(real.len());
    for &r in real {
        let p = sigmoid(r.as_f64());
        loss -= clamped_ln(p) / nr;
        d_real.push(T::from_f64(if p > LOG_CLAMP { -sigmoid(-r.as_f64()) / nr } else { 0.0 }));
    }
    let mut d_fake = Vec::with_capacity(fake.len());
    for &f in fake {
        let q = sigmoid(-f.as_f64());
        loss -= clamped_ln(q) / nf;
        d_fake.push(T::from_f64(if q > LOG_CLAMP { sigmoid(f.as_f64()) / nf } else { 0.0 }));
    }
    Ok((loss, d_real, d_fake))
}

/// Generator adversarial term on the fake logits and its gradient.
pub fn generator_adv_loss_grad<T: Scalar>(fake: &[T], form: GanForm) -> Result<(f64, Vec<T>)> {
    check_logits(fake)?;
    let nf = fake.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(fake.len());
    for &f in fake {
        let f = f.as_f64();
        match form {
            GanForm::NonSaturating => {
                let p = sigmoid(f);
                loss -= clamped_ln(p) / nf;
                grad.push(T::from_f64(if p > LOG_CLAMP { -sigmoid(-f) / nf } else { 0.0 }));
            }
            GanForm::Minimax => {
                let q = sigmoid(-f);
                loss += clamped_ln(q) / nf;
                grad.push(T::from_f64(if q > LOG_CLAMP { -sigmoid(f) / nf } else { 0.0 }));
            }
        }
    }
    Ok((loss, grad))
}

/// `(d_loss, g_loss)` for a pair of patch-logit grids.
pub fn adversarial_losses<T: Scalar>(real: &[T], fake: &[T], form: GanForm) -> Result<(f64, f64)> {
    let (d, _, _) = discriminator_loss_grad(real, fake)?;
    let (g, _) = generator_adv_loss_grad(fake, form)?;
    Ok((d, g))
}

/// Per-pixel mean squared error of one image.
pub fn l2_reconstruction_loss<T: Scalar>(output: &[T], target: &[T]) -> Result<f64> {
    if output.len() != target.len() || output.is_empty() {
        return Err(Error::Dimension(format!(
            "reconstruction of {} values against {}",
            output.len(),
            target.len()
        )));
    }
    let sum: f64 = output
        .iter()
        .zip(target)
        .map(|(&o, &t)| {
            let d = o.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(sum / output.len() as f64)
}

/// Batch mean of the per-image L2 loss with its gradient on `output`.
pub fn l2_batch_grad<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if output.shape() != target.shape() || output.is_empty() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} against {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let total = output.len() as f64;
    let scale = T::from_f64(2.0 / total);
    let mut grad = output.zeros_like();
    let mut sum = 0.0;
    for ((g, &o), &t) in grad.data.iter_mut().zip(&output.data).zip(&target.data) {
        let d = o - t;
        sum += d.as_f64() * d.as_f64();
        *g = d * scale;
    }
    Ok((sum / total, grad))
}

/// Batch mean of `1/(C_p W_p H_p) Σ |a - b|` over per-image feature grids,
/// with the gradient on `a`.
pub fn feature_l1_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "feature grids {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let total = a.len() as f64;
    let scale = T::from_f64(1.0 / total);
    let mut grad = a.zeros_like();
    let mut sum = 0.0;
    for ((g, &x), &y) in grad.data.iter_mut().zip(&a.data).zip(&b.data) {
        let d = x - y;
        sum += d.abs().as_f64();
        *g = if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        };
    }
    Ok((sum / total, grad))
}

/// Perceptual distance between two image batches: the batch mean of the
/// normalised feature-space L1 distance.
pub fn perceptual_loss<T: Scalar>(
    perc: &PerceptualNet<T>,
    output: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "perceptual loss of {:?} against {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let fo = perc.features(output)?;
    let ft = perc.features(target)?;
    feature_l1_grad(&fo, &ft).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SQ: ContrastiveForm = ContrastiveForm::SquaredHinge;
    const HS: ContrastiveForm = ContrastiveForm::HingeOfSquare;

    #[test]
    fn distance_examples() {
        assert_eq!(embedding_distance(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(embedding_distance(&[3.0f64, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(embedding_distance(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let z = [0.3f64, -0.2];
        assert_eq!(contrastive_loss(&z, &z, 0, 1.0, SQ).unwrap(), 0.0);
        for form in [SQ, HS] {
            assert_eq!(contrastive_loss(&[2.0f64, 0.0], &[0.0, 0.0], 1, 1.0, form).unwrap(), 0.0);
        }
        assert_eq!(contrastive_loss(&[1.0f64, 0.0], &[0.0, 0.0], 0, 1.0, SQ).unwrap(), 0.5);
        assert_eq!(contrastive_loss(&[0.5f64, 0.0], &[0.0, 0.0], 1, 1.0, SQ).unwrap(), 0.125);
        // ½ max(0, 1 - 0.25)
        assert_eq!(contrastive_loss(&[0.5f64, 0.0], &[0.0, 0.0], 1, 1.0, HS).unwrap(), 0.375);
        assert!(contrastive_loss(&z, &z, 2, 1.0, SQ).is_err());
    }

    #[test]
    fn coupling_examples() {
        let a = [0.0f64, 0.0];
        let b = [1.0f64, 0.0];
        let c = [0.5f64, 0.0];
        assert_eq!(coupling_loss(&[(&a[..], &a[..], 0)], 1.0, SQ).unwrap(), 0.0);
        let batch = [(&b[..], &a[..], 0u8), (&c[..], &a[..], 1u8)];
        assert_eq!(coupling_loss(&batch, 1.0, SQ).unwrap(), 0.3125);
        let rev = [batch[1], batch[0]];
        assert_eq!(coupling_loss(&rev, 1.0, SQ).unwrap(), 0.3125);
        assert!(coupling_loss::<f64>(&[], 1.0, SQ).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let zeros = [0.0f64; 16];
        let (d, g) = adversarial_losses(&zeros, &zeros, GanForm::NonSaturating).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        let (d, _) = adversarial_losses(&[30.0f64; 4], &[-30.0f64; 4], GanForm::Minimax).unwrap();
        assert!(d.abs() < 1e-9);
        assert!(adversarial_losses(&[f64::NAN], &[0.0], GanForm::Minimax).is_err());
        let real = [0.3f64, -1.0, 2.0, 0.0];
        let fake = [1.0f64, -0.5, 0.2, 3.0];
        let perm_r = [2.0f64, 0.0, 0.3, -1.0];
        let perm_f = [3.0f64, 0.2, 1.0, -0.5];
        let a = adversarial_losses(&real, &fake, GanForm::Minimax).unwrap();
        let b = adversarial_losses(&perm_r, &perm_f, GanForm::Minimax).unwrap();
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_reconstruction_loss(&[0.2f64, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(l2_reconstruction_loss(&[0.0f64; 4], &[1.0; 4]).unwrap(), 1.0);
        let o = [0.1f64, 0.5, 0.9];
        let t = [0.3f64, 0.2, 0.4];
        let base = l2_reconstruction_loss(&o, &t).unwrap();
        let scaled: Vec<f64> = o.iter().zip(&t).map(|(a, b)| b + 3.0 * (a - b)).collect();
        let l = l2_reconstruction_loss(&scaled, &t).unwrap();
        assert!((l - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_objective(LossTerms::default(), &cfg).unwrap().total, 0.0);
        let terms = LossTerms {
            l_cpl: 1.0,
            l_gan_profile: 1.5,
            l_gan_frontal: 0.5,
            l_perceptual: 4.0,
            l_l2: 8.0,
            ..LossTerms::default()
        };
        assert_eq!(total_objective(terms, &cfg).unwrap().total, 6.0);
        let off = LossConfig {
            lambda_1: 0.0,
            lambda_2: 0.0,
            lambda_3: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_objective(terms, &off).unwrap().total, 1.0);
        let bad = LossTerms {
            l_l2: f64::INFINITY,
            ..terms
        };
        assert!(matches!(total_objective(bad, &cfg), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn contrastive_monotone_in_distance(
            d1 in 0.0f64..3.0, d2 in 0.0f64..3.0, m in 0.1f64..2.0,
        ) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let l = |d: f64, y: u8, f| contrastive_loss(&[d, 0.0], &[0.0, 0.0], y, m, f).unwrap();
            if lo < hi {
                prop_assert!(l(lo, 0, SQ) < l(hi, 0, SQ));
            }
            for f in [SQ, HS] {
                prop_assert!(l(lo, 1, f) >= l(hi, 1, f));
                prop_assert!(l(lo, 1, f) >= 0.0);
            }
            if hi >= m { prop_assert_eq!(l(hi, 1, SQ), 0.0); }
            if hi * hi >= m { prop_assert_eq!(l(hi, 1, HS), 0.0); }
        }

        #[test]
        fn contrastive_grad_matches_finite_difference(
            z in proptest::collection::vec(-1.0f64..1.0, 6), y in 0u8..2,
        ) {
            let (z1, z2) = z.split_at(3);
            let dist = embedding_distance(z1, z2).unwrap();
            prop_assume!((dist - 1.0).abs() > 1e-3 && dist > 1e-3);
            for form in [SQ, HS] {
                prop_assume!((dist * dist - 1.0).abs() > 1e-3);
                let (_, g) = contrastive_loss_grad(z1, z2, y, 1.0, form).unwrap();
                for k in 0..3 {
                    let eps = 1e-6;
                    let mut p = z1.to_vec();
                    p[k] += eps;
                    let mut m = z1.to_vec();
                    m[k] -= eps;
                    let fd = (contrastive_loss(&p, z2, y, 1.0, form).unwrap()
                        - contrastive_loss(&m, z2, y, 1.0, form).unwrap()) / (2.0 * eps);
                    prop_assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
