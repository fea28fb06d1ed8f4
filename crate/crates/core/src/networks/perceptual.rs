use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Param};
use crate::scalar::Scalar;
use crate::tensor::{relu_backward_inplace, relu_inplace, Tensor};

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 64];

/// Fixed feature extractor for the perceptual loss. Its weights are drawn
/// once and never updated; only input gradients are ever computed.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<T> {
    pub image: (usize, usize, usize),
    pub blocks: Vec<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct PerceptualTrace<T> {
    pub input: Tensor<T>,
    pub acts: Vec<Tensor<T>>,
}

impl<T: Scalar> PerceptualTrace<T> {
    pub fn features(&self) -> &Tensor<T> {
        self.acts.last().expect("three blocks")
    }
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn init<R: Rng + ?Sized>(image: (usize, usize, usize), rng: &mut R) -> Self {
        let mut cin = image.2;
        let blocks = PERCEPTUAL_WIDTHS
            .iter()
            .map(|&w| {
                let conv = Conv2d::init(cin, w, 2, std::f64::consts::SQRT_2, rng);
                cin = w;
                conv
            })
            .collect();
        PerceptualNet { image, blocks }
    }

    /// Feature-grid dimensions `(C_p, H_p, W_p)`.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.image.0, self.image.1);
        for b in &self.blocks {
            (h, w) = b.out_hw(h, w);
        }
        (self.blocks.last().map_or(0, |b| b.out_ch), h, w)
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.weight"), &conv.weight));
            out.push((format!("block.{i}.bias"), &conv.bias));
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for conv in &mut self.blocks {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<PerceptualTrace<T>> {
        let (h, w, c) = self.image;
        if x.c != c || x.h != h || x.w != w {
            return Err(Error::Dimension(format!(
                "perceptual network expects {h}x{w}x{c} grids, got {}x{}x{}",
                x.h, x.w, x.c
            )));
        }
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let mut a = conv.forward(acts.last().unwrap_or(x));
            relu_inplace(&mut a);
            acts.push(a);
        }
        Ok(PerceptualTrace {
            input: x.clone(),
            acts,
        })
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trace = self.forward(x)?;
        Ok(trace.acts.pop().expect("three blocks"))
    }

    /// Gradient with respect to the input image only.
    pub fn backward_input(&self, trace: &PerceptualTrace<T>, d_features: &Tensor<T>) -> Tensor<T> {
        let mut g = d_features.clone();
        for i in (0..self.blocks.len()).rev() {
            relu_backward_inplace(&trace.acts[i], &mut g);
            let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
            g = self.blocks[i]
                .backward(input, &g, None, true)
                .expect("dx requested");
        }
        g
    }
}
