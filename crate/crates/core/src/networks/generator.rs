use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, Param};
use crate::networks::GeneratorConfig;
use crate::scalar::Scalar;
use crate::tensor::{
    avg_pool, avg_pool_backward, flatten, relu_backward_inplace, relu_inplace,
    sigmoid_backward_inplace, sigmoid_inplace, unflatten, upsample2, upsample2_backward, Tensor,
};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// U-Net autoencoder: a stride-2 convolutional encoder ladder, a pooled
/// fully-connected bottleneck embedding, and a mirrored decoder whose stages
/// consume skip activations from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub image: (usize, usize, usize),
    pub embedding_dim: usize,
    /// Fine-to-coarse; stage `i` halves the resolution.
    pub encoder: Vec<Conv2d<T>>,
    /// Pooled features -> embedding.
    pub embed: Linear<T>,
    /// Embedding -> coarsest grid (flattened).
    pub expand: Linear<T>,
    /// Coarse-to-fine; stage `i` sees `concat(upsampled, skip)`.
    pub decoder: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

/// Activations retained from an encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub input: Tensor<T>,
    /// Post-rectifier stage outputs, fine-to-coarse.
    pub acts: Vec<Tensor<T>>,
    pub pooled: Tensor<T>,
    /// `[d, N, 1, 1]`
    pub embedding: Tensor<T>,
}

impl<T: Scalar> EncoderTrace<T> {
    /// Skip activations ordered coarse-to-fine, as the decoder consumes them.
    pub fn skips(&self) -> Vec<&Tensor<T>> {
        self.acts.iter().rev().collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    pub embedding: Tensor<T>,
    pub expanded: Tensor<T>,
    pub stage_inputs: Vec<Tensor<T>>,
    pub stage_outputs: Vec<Tensor<T>>,
    pub head_input: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GeneratorTrace<T> {
    pub enc: EncoderTrace<T>,
    pub dec: DecoderTrace<T>,
}

impl<T: Scalar> GeneratorTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.dec.output
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.enc.embedding
    }
}

/// Channel widths of the encoder stages.
pub fn encoder_widths(base: usize, n_down: usize) -> Vec<usize> {
    (0..n_down).map(|i| base << i).collect()
}

/// Output widths of the decoder stages (mirror of the encoder).
pub fn decoder_widths(base: usize, n_down: usize) -> Vec<usize> {
    let enc = encoder_widths(base, n_down);
    (0..n_down)
        .map(|i| if i + 2 <= n_down { enc[n_down - 2 - i] } else { base })
        .collect()
}

impl<T: Scalar> Generator<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let (h, w, c) = cfg.image_size.hwc();
        let n = cfg.n_down;
        let enc_w = encoder_widths(cfg.base_channels, n);
        let dec_w = decoder_widths(cfg.base_channels, n);
        let mut encoder = Vec::with_capacity(n);
        for i in 0..n {
            let cin = if i == 0 { c } else { enc_w[i - 1] };
            encoder.push(Conv2d::init(cin, enc_w[i], 2, RELU_GAIN, rng));
        }
        let c_last = enc_w[n - 1];
        let (hb, wb) = (h >> n, w >> n);
        let embed = Linear::init(c_last, cfg.embedding_dim, 1.0, rng);
        let expand = Linear::init(cfg.embedding_dim, c_last * hb * wb, RELU_GAIN, rng);
        let mut decoder = Vec::with_capacity(n);
        let mut c_up = c_last;
        for i in 0..n {
            let skip = enc_w[n - 1 - i];
            decoder.push(Conv2d::init(c_up + skip, dec_w[i], 1, RELU_GAIN, rng));
            c_up = dec_w[i];
        }
        let head = Conv2d::init(c_up, c, 1, 1.0, rng);
        Generator {
            image: (h, w, c),
            embedding_dim: cfg.embedding_dim,
            encoder,
            embed,
            expand,
            decoder,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Generator {
            image: self.image,
            embedding_dim: self.embedding_dim,
            encoder: self.encoder.iter().map(Conv2d::zeros_like).collect(),
            embed: self.embed.zeros_like(),
            expand: self.expand.zeros_like(),
            decoder: self.decoder.iter().map(Conv2d::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn n_down(&self) -> usize {
        self.encoder.len()
    }

    /// Shape `(C, H, W)` of the coarsest encoder activation.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let n = self.n_down();
        (
            self.encoder[n - 1].out_ch,
            self.image.0 >> n,
            self.image.1 >> n,
        )
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.encoder.iter().enumerate() {
            out.push((format!("enc.{i}.weight"), &conv.weight));
            out.push((format!("enc.{i}.bias"), &conv.bias));
        }
        out.push(("embed.weight".into(), &self.embed.weight));
        out.push(("embed.bias".into(), &self.embed.bias));
        out.push(("expand.weight".into(), &self.expand.weight));
        out.push(("expand.bias".into(), &self.expand.bias));
        for (i, conv) in self.decoder.iter().enumerate() {
            out.push((format!("dec.{i}.weight"), &conv.weight));
            out.push((format!("dec.{i}.bias"), &conv.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Same order as [`Generator::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for conv in &mut self.encoder {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.embed.weight);
        out.push(&mut self.embed.bias);
        out.push(&mut self.expand.weight);
        out.push(&mut self.expand.bias);
        for conv in &mut self.decoder {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.image;
        if x.c != c || x.h != h || x.w != w {
            return Err(Error::Dimension(format!(
                "generator expects {h}x{w}x{c} images, got {}x{}x{}",
                x.h, x.w, x.c
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<EncoderTrace<T>> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.n_down());
        for conv in &self.encoder {
            let mut a = conv.forward(acts.last().unwrap_or(x));
            relu_inplace(&mut a);
            acts.push(a);
        }
        let pooled = avg_pool(acts.last().expect("at least one stage"));
        let embedding = self.embed.forward(&pooled);
        Ok(EncoderTrace {
            input: x.clone(),
            acts,
            pooled,
            embedding,
        })
    }

    /// Decodes an embedding batch. `skips` are coarse-to-fine; `None` feeds
    /// zero grids in place of every skip activation.
    pub fn decode(
        &self,
        embedding: &Tensor<T>,
        skips: Option<&[&Tensor<T>]>,
    ) -> Result<DecoderTrace<T>> {
        if embedding.c * embedding.h * embedding.w != self.embedding_dim {
            return Err(Error::Dimension(format!(
                "embedding of width {} given to a decoder of width {}",
                embedding.c * embedding.h * embedding.w,
                self.embedding_dim
            )));
        }
        let n = embedding.n;
        let n_down = self.n_down();
        if let Some(s) = skips {
            if s.len() != n_down {
                return Err(Error::Dimension(format!(
                    "decoder needs {n_down} skip grids, got {}",
                    s.len()
                )));
            }
        }
        let (cb, hb, wb) = self.bottleneck_shape();
        let mut expanded = unflatten(&self.expand.forward(embedding), cb, hb, wb);
        relu_inplace(&mut expanded);

        let mut stage_inputs = Vec::with_capacity(n_down);
        let mut stage_outputs = Vec::with_capacity(n_down);
        let mut up = expanded.clone();
        for (i, conv) in self.decoder.iter().enumerate() {
            let skip_ch = conv.in_ch - up.c;
            let zero;
            let skip = match skips {
                Some(s) => {
                    let t = s[i];
                    if t.c != skip_ch || t.n != n || t.h != up.h || t.w != up.w {
                        return Err(Error::Dimension(format!(
                            "skip {i} has shape {:?}, decoder expects [{skip_ch}, {n}, {}, {}]",
                            t.shape(),
                            up.h,
                            up.w
                        )));
                    }
                    t
                }
                None => {
                    zero = Tensor::zeros(skip_ch, n, up.h, up.w);
                    &zero
                }
            };
            let input = Tensor::concat_channels(&up, skip)?;
            let mut out = conv.forward(&input);
            relu_inplace(&mut out);
            up = upsample2(&out);
            stage_inputs.push(input);
            stage_outputs.push(out);
        }
        let mut output = self.head.forward(&up);
        sigmoid_inplace(&mut output);
        Ok(DecoderTrace {
            embedding: embedding.clone(),
            expanded,
            stage_inputs,
            stage_outputs,
            head_input: up,
            output,
        })
    }

    /// Autoencoding pass with matched skips.
    pub fn forward(&self, x: &Tensor<T>) -> Result<GeneratorTrace<T>> {
        let enc = self.encode(x)?;
        let dec = {
            let skips = enc.skips();
            self.decode(&enc.embedding, Some(&skips))?
        };
        Ok(GeneratorTrace { enc, dec })
    }

    /// Backpropagates output and/or embedding gradients through a matched
    /// forward trace, accumulating into `grad`. Returns the pixel gradient
    /// when `want_dx` is set.
    pub fn backward(
        &self,
        trace: &GeneratorTrace<T>,
        d_output: Option<&Tensor<T>>,
        d_embedding: Option<&Tensor<T>>,
        grad: &mut Generator<T>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let enc = &trace.enc;
        let dec = &trace.dec;
        let n_down = self.n_down();
        let mut d_acts: Vec<Tensor<T>> = enc.acts.iter().map(Tensor::zeros_like).collect();
        let mut d_emb = match d_embedding {
            Some(d) => d.clone(),
            None => enc.embedding.zeros_like(),
        };

        if let Some(d_out) = d_output {
            let mut g = d_out.clone();
            sigmoid_backward_inplace(&dec.output, &mut g);
            let mut d_up = self
                .head
                .backward(&dec.head_input, &g, Some(&mut grad.head), true)
                .expect("dx requested");
            for i in (0..n_down).rev() {
                let mut d_stage = upsample2_backward(&d_up);
                relu_backward_inplace(&dec.stage_outputs[i], &mut d_stage);
                let d_in = self.decoder[i]
                    .backward(
                        &dec.stage_inputs[i],
                        &d_stage,
                        Some(&mut grad.decoder[i]),
                        true,
                    )
                    .expect("dx requested");
                let skip_ch = enc.acts[n_down - 1 - i].c;
                let (d_prev, d_skip) = d_in.split_channels(d_in.c - skip_ch);
                d_acts[n_down - 1 - i].add_assign(&d_skip);
                d_up = d_prev;
            }
            relu_backward_inplace(&dec.expanded, &mut d_up);
            let d_flat = flatten(&d_up);
            let d_e = self
                .expand
                .backward(&dec.embedding, &d_flat, Some(&mut grad.expand), true)
                .expect("dx requested");
            d_emb.add_assign(&d_e);
        }

        let d_pooled = self
            .embed
            .backward(&enc.pooled, &d_emb, Some(&mut grad.embed), true)
            .expect("dx requested");
        let last = &enc.acts[n_down - 1];
        d_acts[n_down - 1].add_assign(&avg_pool_backward(&d_pooled, last.h, last.w));

        let mut dx = None;
        for i in (0..n_down).rev() {
            let mut g = std::mem::replace(&mut d_acts[i], Tensor::zeros(0, 0, 0, 0));
            relu_backward_inplace(&enc.acts[i], &mut g);
            let input = if i == 0 { &enc.input } else { &enc.acts[i - 1] };
            let d_in =
                self.encoder[i].backward(input, &g, Some(&mut grad.encoder[i]), i > 0 || want_dx);
            if i > 0 {
                d_acts[i - 1].add_assign(&d_in.expect("dx requested"));
            } else {
                dx = d_in;
            }
        }
        dx
    }
}
