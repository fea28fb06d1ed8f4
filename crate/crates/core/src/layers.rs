//! Parameterised building blocks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Column-buffer budget (elements) per convolution chunk.
const COL_BUDGET: usize = 1 << 18;

/// A named-by-position parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Param {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

/// 3x3 convolution with zero padding 1 and stride 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// `[out, in, 3, 3]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled Gaussian weights (`std = gain / sqrt(in * 9)`), zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / ((in_ch * 9) as f64).sqrt();
        Conv2d {
            in_ch,
            out_ch,
            stride,
            weight: Param::gaussian(&[out_ch, in_ch, 3, 3], std, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            stride: self.stride,
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / self.stride + 1, (w + 2 - 3) / self.stride + 1)
    }

    fn k(&self) -> usize {
        self.in_ch * 9
    }

    fn chunk_samples(&self, ho: usize, wo: usize) -> usize {
        (COL_BUDGET / (self.k() * ho * wo).max(1)).max(1)
    }

    /// Kernel used for an input of width `w`: the direct kernel for thin
    /// stride-1 layers on wide planes (GEMM is memory-bound there), im2col +
    /// GEMM otherwise.
    pub fn default_path(&self, w: usize) -> ConvPath {
        if self.stride == 1 && self.out_ch <= DIRECT_MAX_OUT && w >= DIRECT_MIN_WIDTH {
            ConvPath::Direct
        } else {
            ConvPath::Im2col
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_via(self.default_path(x.w), x)
    }

    pub fn forward_via(&self, path: ConvPath, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        match path {
            ConvPath::Direct if self.stride == 1 => self.forward_direct(x),
            _ => self.forward_im2col(x),
        }
    }

    fn forward_im2col(&self, x: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(self.out_ch, x.n, ho, wo);
        let plane = ho * wo;
        let total = x.n * plane;
        let k = self.k();
        let step = self.chunk_samples(ho, wo);
        let mut col = Vec::new();
        let mut n0 = 0;
        while n0 < x.n {
            let n1 = (n0 + step).min(x.n);
            let l = (n1 - n0) * plane;
            col.resize(k * l, T::zero());
            im2col(x, n0, n1, self.stride, ho, wo, &mut col);
            gemm(
                T::one(),
                &self.weight.data,
                MatView::row_major(self.out_ch, k),
                &col,
                MatView::row_major(k, l),
                T::zero(),
                &mut out.data,
                MatView {
                    rows: self.out_ch,
                    cols: l,
                    row_stride: total,
                    col_stride: 1,
                    offset: n0 * plane,
                },
            );
            n0 = n1;
        }
        for (co, &b) in self.bias.data.iter().enumerate() {
            if b != T::zero() {
                for v in &mut out.data[co * total..(co + 1) * total] {
                    *v += b;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient when `want_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut Conv2d<T>>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        self.backward_via(self.default_path(x.w), x, dy, grad, want_dx)
    }

    pub fn backward_via(
        &self,
        path: ConvPath,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut Conv2d<T>>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        assert_eq!(dy.shape(), [self.out_ch, x.n, ho, wo], "conv grad shape");
        match path {
            ConvPath::Direct if self.stride == 1 => self.backward_direct(x, dy, grad, want_dx),
            _ => self.backward_im2col(x, dy, grad, want_dx),
        }
    }

    fn backward_im2col(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad: Option<&mut Conv2d<T>>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let plane = ho * wo;
        let total = x.n * plane;
        let k = self.k();
        let step = self.chunk_samples(ho, wo);
        let mut dx = want_dx.then(|| x.zeros_like());
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        if let Some(g) = grad.as_deref_mut() {
            for (co, gb) in g.bias.data.iter_mut().enumerate() {
                *gb += dy.data[co * total..(co + 1) * total].iter().copied().sum::<T>();
            }
        }
        let mut n0 = 0;
        while n0 < x.n {
            let n1 = (n0 + step).min(x.n);
            let l = (n1 - n0) * plane;
            let dy_view = MatView {
                rows: self.out_ch,
                cols: l,
                row_stride: total,
                col_stride: 1,
                offset: n0 * plane,
            };
            if let Some(g) = grad.as_deref_mut() {
                col.resize(k * l, T::zero());
                im2col(x, n0, n1, self.stride, ho, wo, &mut col);
                gemm(
                    T::one(),
                    &dy.data,
                    dy_view,
                    &col,
                    MatView::row_major(k, l).t(),
                    T::one(),
                    &mut g.weight.data,
                    MatView::row_major(self.out_ch, k),
                );
            }
            if let Some(dx) = dx.as_mut() {
                dcol.resize(k * l, T::zero());
                gemm(
                    T::one(),
                    &self.weight.data,
                    MatView::row_major(self.out_ch, k).t(),
                    &dy.data,
                    dy_view,
                    T::zero(),
                    &mut dcol,
                    MatView::row_major(k, l),
                );
                col2im(&dcol, n0, n1, self.stride, ho, wo, dx);
            }
            n0 = n1;
        }
        dx
    }

    fn forward_direct(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let mut out = Tensor::zeros(self.out_ch, x.n, h, w);
        for o in 0..self.out_ch {
            let b = self.bias.data[o];
            for n in 0..x.n {
                let dst = &mut out.data[(o * x.n + n) * plane..][..plane];
                dst.fill(b);
                for i in 0..self.in_ch {
                    let src = &x.data[(i * x.n + n) * plane..][..plane];
                    let taps: &[T; 9] = self.weight.data[(o * self.in_ch + i) * 9..][..9]
                        .try_into()
                        .expect("nine taps");
                    conv3x3_acc(dst, src, h, w, taps);
                }
            }
        }
        out
    }

    fn backward_direct(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut Conv2d<T>>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let total = x.n * plane;
        if let Some(g) = grad {
            for o in 0..self.out_ch {
                let dyo = &dy.data[o * total..][..total];
                g.bias.data[o] += dyo.iter().copied().sum::<T>();
                for i in 0..self.in_ch {
                    let mut acc = [T::zero(); 9];
                    for n in 0..x.n {
                        correlate3x3_acc(
                            &dyo[n * plane..][..plane],
                            &x.data[(i * x.n + n) * plane..][..plane],
                            h,
                            w,
                            &mut acc,
                        );
                    }
                    for (gw, a) in g.weight.data[(o * self.in_ch + i) * 9..][..9].iter_mut().zip(acc) {
                        *gw += a;
                    }
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = x.zeros_like();
        for i in 0..self.in_ch {
            for n in 0..x.n {
                let dst = &mut dx.data[(i * x.n + n) * plane..][..plane];
                for o in 0..self.out_ch {
                    let src = &dy.data[(o * x.n + n) * plane..][..plane];
                    let wt = &self.weight.data[(o * self.in_ch + i) * 9..][..9];
                    let mut flipped = [T::zero(); 9];
                    for (k, f) in flipped.iter_mut().enumerate() {
                        *f = wt[8 - k];
                    }
                    conv3x3_acc(dst, src, h, w, &flipped);
                }
            }
        }
        Some(dx)
    }
}

/// Convolution kernel selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    Im2col,
    /// Shifted-row accumulation; stride 1 only (stride 2 falls back).
    Direct,
}

/// Measured crossover of the direct kernel against im2col + GEMM.
const DIRECT_MIN_WIDTH: usize = 16;
const DIRECT_MAX_OUT: usize = 4;

/// `dst[y][x] += Σ taps[a][b] · src[y+a-1][x+b-1]` over one zero-padded
/// `h × w` plane.
fn conv3x3_acc<T: Scalar>(dst: &mut [T], src: &[T], h: usize, w: usize, taps: &[T; 9]) {
    if w < 3 {
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                for a in 0..3 {
                    for b in 0..3 {
                        let (sy, sx) = (y + a, xx + b);
                        if sy >= 1 && sy <= h && sx >= 1 && sx <= w {
                            s += taps[a * 3 + b] * src[(sy - 1) * w + sx - 1];
                        }
                    }
                }
                dst[y * w + xx] += s;
            }
        }
        return;
    }
    let m = w - 2;
    for y in 0..h {
        let drow = &mut dst[y * w..][..w];
        for a in 0..3 {
            if y + a < 1 || y + a > h {
                continue;
            }
            let srow = &src[(y + a - 1) * w..][..w];
            let (t0, t1, t2) = (taps[a * 3], taps[a * 3 + 1], taps[a * 3 + 2]);
            drow[0] += t1 * srow[0] + t2 * srow[1];
            drow[w - 1] += t0 * srow[w - 2] + t1 * srow[w - 1];
            let (l, c, r) = (&srow[..m], &srow[1..m + 1], &srow[2..m + 2]);
            for (k, d) in drow[1..m + 1].iter_mut().enumerate() {
                *d += t0 * l[k] + t1 * c[k] + t2 * r[k];
            }
        }
    }
}

/// `acc[a][b] += Σ dy[y][x] · src[y+a-1][x+b-1]` over one zero-padded plane.
fn correlate3x3_acc<T: Scalar>(dy: &[T], src: &[T], h: usize, w: usize, acc: &mut [T; 9]) {
    for a in 0..3 {
        for y in 0..h {
            if y + a < 1 || y + a > h {
                continue;
            }
            let drow = &dy[y * w..][..w];
            let srow = &src[(y + a - 1) * w..][..w];
            for b in 0..3 {
                // x + b - 1 in [0, w)
                let lo = if b == 0 { 1 } else { 0 };
                let hi = if b == 2 { w - 1 } else { w };
                if lo >= hi {
                    continue;
                }
                acc[a * 3 + b] += dot(&drow[lo..hi], &srow[lo + b - 1..hi + b - 1]);
            }
        }
    }
}

/// Dot product with eight fixed-order partial sums (vectorisable, deterministic).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `w`.
fn valid_cols(kx: usize, stride: usize, wo: usize, w: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    // ox * stride + kx - 1 <= w - 1
    let hi = if kx > w { 0 } else { ((w - kx) / stride + 1).min(wo) };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n0: usize,
    n1: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let l = (n1 - n0) * ho * wo;
    let (h, w) = (x.h as isize, x.w as isize);
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * l;
                for (j, n) in (n0..n1).enumerate() {
                    let base = (ci * x.n + n) * x.h * x.w;
                    for oy in 0..ho {
                        let start = row + (j * ho + oy) * wo;
                        let dst = &mut col[start..start + wo];
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x.data[base + iy as usize * x.w..][..x.w];
                        let (lo, hi) = valid_cols(kx, stride, wo, w as usize);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                        } else {
                            for (ox, d) in (lo..hi).zip(&mut dst[lo..hi]) {
                                *d = src[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    dcol: &[T],
    n0: usize,
    n1: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut Tensor<T>,
) {
    let l = (n1 - n0) * ho * wo;
    let (h, w) = (dx.h as isize, dx.w as isize);
    let (xh, xw, xn) = (dx.h, dx.w, dx.n);
    for ci in 0..dx.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * l;
                for (j, n) in (n0..n1).enumerate() {
                    let base = (ci * xn + n) * xh * xw;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let start = row + (j * ho + oy) * wo;
                        let src = &dcol[start..start + wo];
                        let dst = &mut dx.data[base + iy as usize * xw..][..xw];
                        let (lo, hi) = valid_cols(kx, stride, wo, w as usize);
                        for (ox, &g) in (lo..hi).zip(&src[lo..hi]) {
                            dst[ox * stride + kx - 1] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected map over `[in, N, 1, 1]` feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: Param::gaussian(&[out_dim, in_dim], std, rng),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c * x.h * x.w, self.in_dim, "linear input width");
        let n = x.n;
        let mut out = Tensor::zeros(self.out_dim, n, 1, 1);
        gemm(
            T::one(),
            &self.weight.data,
            MatView::row_major(self.out_dim, self.in_dim),
            &x.data,
            MatView::row_major(self.in_dim, n),
            T::zero(),
            &mut out.data,
            MatView::row_major(self.out_dim, n),
        );
        for (o, &b) in self.bias.data.iter().enumerate() {
            for v in &mut out.data[o * n..(o + 1) * n] {
                *v += b;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut Linear<T>>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = x.n;
        if let Some(g) = grad {
            gemm(
                T::one(),
                &dy.data,
                MatView::row_major(self.out_dim, n),
                &x.data,
                MatView::row_major(self.in_dim, n).t(),
                T::one(),
                &mut g.weight.data,
                MatView::row_major(self.out_dim, self.in_dim),
            );
            for (o, gb) in g.bias.data.iter_mut().enumerate() {
                *gb += dy.data[o * n..(o + 1) * n].iter().copied().sum::<T>();
            }
        }
        want_dx.then(|| {
            let mut dx = Tensor::zeros(self.in_dim, n, 1, 1);
            gemm(
                T::one(),
                &self.weight.data,
                MatView::row_major(self.out_dim, self.in_dim).t(),
                &dy.data,
                MatView::row_major(self.out_dim, n),
                T::zero(),
                &mut dx.data,
                MatView::row_major(self.in_dim, n),
            );
            Tensor { c: x.c, h: x.h, w: x.w, ..dx }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as an independent reference.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(conv.out_ch, x.n, ho, wo);
        for co in 0..conv.out_ch {
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.data[co];
                        for ci in 0..conv.in_ch {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * conv.stride + ky) as isize - 1;
                                    let ix = (ox * conv.stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    s += conv.weight.data[((co * conv.in_ch + ci) * 3 + ky) * 3 + kx]
                                        * x.at(ci, n, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = out.idx(co, n, oy, ox);
                        out.data[i] = s;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let p = Param::<f64>::gaussian(&[c * n * h * w], 1.0, rng);
        Tensor::from_vec(c, n, h, w, p.data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            for (h, w) in [(6, 8), (1, 1), (2, 2), (3, 19), (17, 5)] {
                let mut conv = Conv2d::<f64>::init(3, 5, stride, 1.0, &mut rng);
                conv.bias = Param::gaussian(&[5], 0.5, &mut rng);
                let x = random_tensor(&mut rng, 3, 4, h, w);
                let slow = conv_naive(&conv, &x);
                for path in [ConvPath::Im2col, ConvPath::Direct] {
                    let fast = conv.forward_via(path, &x);
                    assert_eq!(fast.shape(), slow.shape());
                    for (a, b) in fast.data.iter().zip(&slow.data) {
                        assert!((a - b).abs() < 1e-12, "{path:?} stride {stride} {h}x{w}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, h, w) in [(2, 4, 4), (1, 4, 4), (1, 3, 9), (1, 2, 1)] {
            let mut conv = Conv2d::<f64>::init(2, 3, stride, 1.0, &mut rng);
            conv.bias = Param::gaussian(&[3], 0.5, &mut rng);
            let x = random_tensor(&mut rng, 2, 3, h, w);
            let (ho, wo) = conv.out_hw(h, w);
            let probe = random_tensor(&mut rng, 3, 3, ho, wo);
            let objective = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                c.forward_via(ConvPath::Im2col, x)
                    .data
                    .iter()
                    .zip(&probe.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            for path in [ConvPath::Im2col, ConvPath::Direct] {
                let mut grad = conv.zeros_like();
                let dx = conv.backward_via(path, &x, &probe, Some(&mut grad), true).unwrap();
                let eps = 1e-6;
                for i in [0usize, 7, 20, 53] {
                    let mut p = conv.clone();
                    p.weight.data[i] += eps;
                    let mut m = conv.clone();
                    m.weight.data[i] -= eps;
                    let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps);
                    assert!((fd - grad.weight.data[i]).abs() < 1e-7, "{path:?} weight {i}");
                }
                for i in (0..x.len()).step_by(5) {
                    let mut xp = x.clone();
                    xp.data[i] += eps;
                    let mut xm = x.clone();
                    xm.data[i] -= eps;
                    let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
                    assert!((fd - dx.data[i]).abs() < 1e-7, "{path:?} input {i}");
                }
                let fd_b = {
                    let mut p = conv.clone();
                    p.bias.data[1] += eps;
                    let mut m = conv.clone();
                    m.bias.data[1] -= eps;
                    (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps)
                };
                assert!((fd_b - grad.bias.data[1]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn backward_without_dx_only_touches_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::init(2, 2, 1, 1.0, &mut rng);
        let x = random_tensor(&mut rng, 2, 1, 20, 20);
        let dy = random_tensor(&mut rng, 2, 1, 20, 20);
        let mut a = conv.zeros_like();
        let mut b = conv.zeros_like();
        assert!(conv.backward_via(ConvPath::Direct, &x, &dy, Some(&mut a), false).is_none());
        conv.backward_via(ConvPath::Im2col, &x, &dy, Some(&mut b), false);
        for (p, q) in a.weight.data.iter().zip(&b.weight.data) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::<f64>::init(4, 3, 1.0, &mut rng);
        let x = random_tensor(&mut rng, 4, 2, 1, 1);
        let probe = random_tensor(&mut rng, 3, 2, 1, 1);
        let f = |l: &Linear<f64>, x: &Tensor<f64>| -> f64 {
            l.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &probe, Some(&mut g), true).unwrap();
        let eps = 1e-6;
        for i in 0..12 {
            let mut p = lin.clone();
            p.weight.data[i] += eps;
            let mut m = lin.clone();
            m.weight.data[i] -= eps;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
            assert!((fd - g.weight.data[i]).abs() < 1e-8);
        }
        for i in 0..8 {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (f(&lin, &xp) - f(&lin, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
    }
}
