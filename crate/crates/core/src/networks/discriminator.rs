use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Param};
use crate::scalar::Scalar;
use crate::tensor::{leaky_relu_backward_inplace, leaky_relu_inplace, Tensor};

/// Negative slope of the discriminator's leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.3;

/// Conditional patch classifier over `concat(condition, candidate)`:
/// three stride-2 blocks followed by a 1-channel logit convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub image: (usize, usize, usize),
    pub blocks: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTrace<T> {
    pub input: Tensor<T>,
    pub acts: Vec<Tensor<T>>,
    /// `[1, N, H/8, W/8]`
    pub logits: Tensor<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init<R: Rng + ?Sized>(image: (usize, usize, usize), base: usize, rng: &mut R) -> Self {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let widths = [base, base * 2, base * 4];
        let mut cin = image.2 * 2;
        let mut blocks = Vec::with_capacity(3);
        for &w in &widths {
            blocks.push(Conv2d::init(cin, w, 2, gain, rng));
            cin = w;
        }
        let head = Conv2d::init(cin, 1, 1, 1.0, rng);
        Discriminator {
            image,
            blocks,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Discriminator {
            image: self.image,
            blocks: self.blocks.iter().map(Conv2d::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Logit-grid size for the configured image.
    pub fn grid_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.image.0, self.image.1);
        for b in &self.blocks {
            (h, w) = b.out_hw(h, w);
        }
        (h, w)
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.weight"), &conv.weight));
            out.push((format!("block.{i}.bias"), &conv.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for conv in &mut self.blocks {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn forward(
        &self,
        condition: &Tensor<T>,
        candidate: &Tensor<T>,
    ) -> Result<DiscriminatorTrace<T>> {
        let (h, w, c) = self.image;
        for t in [condition, candidate] {
            if t.c != c || t.h != h || t.w != w {
                return Err(Error::Dimension(format!(
                    "discriminator expects {h}x{w}x{c} grids, got {}x{}x{}",
                    t.h, t.w, t.c
                )));
            }
        }
        let slope = T::from_f64(LEAKY_SLOPE);
        let input = Tensor::concat_channels(condition, candidate)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let mut a = conv.forward(acts.last().unwrap_or(&input));
            leaky_relu_inplace(&mut a, slope);
            acts.push(a);
        }
        let logits = self.head.forward(acts.last().expect("three blocks"));
        Ok(DiscriminatorTrace {
            input,
            acts,
            logits,
        })
    }

    /// Accumulates parameter gradients into `grad` when given; returns the
    /// gradient with respect to the candidate image when requested.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        d_logits: &Tensor<T>,
        mut grad: Option<&mut Discriminator<T>>,
        want_d_candidate: bool,
    ) -> Option<Tensor<T>> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let nb = self.blocks.len();
        let mut g = self
            .head
            .backward(
                &trace.acts[nb - 1],
                d_logits,
                grad.as_deref_mut().map(|g| &mut g.head),
                true,
            )
            .expect("dx requested");
        for i in (0..nb).rev() {
            leaky_relu_backward_inplace(&trace.acts[i], &mut g, slope);
            let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
            let need_dx = i > 0 || want_d_candidate;
            let d_in = self.blocks[i].backward(
                input,
                &g,
                grad.as_deref_mut().map(|g| &mut g.blocks[i]),
                need_dx,
            );
            match d_in {
                Some(d) if i > 0 => g = d,
                Some(d) => return Some(d.split_channels(self.image.2).1),
                None => return None,
            }
        }
        None
    }
}
