//! Dense activation grids in channel-major batch layout `[C, N, H, W]`.
//!
//! Keeping the channel axis outermost turns every convolution into a single
//! `weights x columns` product whose result is already in the right layout,
//! and makes channel concatenation a plain append.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * n * h * w {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot form a {c}x{n}x{h}x{w} grid",
                data.len()
            )));
        }
        Ok(Tensor { c, n, h, w, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.n, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, n, y, x)]
    }

    /// Copies the `[C, H, W]` block of one batch entry.
    pub fn sample_chw(&self, n: usize) -> Vec<T> {
        let p = self.plane();
        let mut out = Vec::with_capacity(self.c * p);
        for c in 0..self.c {
            let start = (c * self.n + n) * p;
            out.extend_from_slice(&self.data[start..start + p]);
        }
        out
    }

    /// Batch of a single `[C, H, W]` block.
    pub fn from_chw(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(c, 1, h, w, data)
    }

    /// Stacks equal-shape tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        if parts.iter().any(|t| t.c != c || t.h != h || t.w != w) {
            return Err(Error::Dimension("stacked tensors differ in shape".into()));
        }
        let n: usize = parts.iter().map(|t| t.n).sum();
        let p = h * w;
        let mut data = Vec::with_capacity(c * n * p);
        for ch in 0..c {
            for t in parts {
                let start = ch * t.n * p;
                data.extend_from_slice(&t.data[start..start + t.n * p]);
            }
        }
        Ok(Tensor { c, n, h, w, data })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Dimension(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: first `c_first` channels, rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = c_first * self.n * self.plane();
        (
            Tensor {
                c: c_first,
                n: self.n,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                c: self.c - c_first,
                n: self.n,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `grad *= 1[out > 0]`, using the post-activation values.
pub fn relu_backward_inplace<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn leaky_relu_inplace<T: Scalar>(t: &mut Tensor<T>, slope: T) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

pub fn leaky_relu_backward_inplace<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>, slope: T) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o < T::zero() {
            *g *= slope;
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        *v = sigmoid(*v);
    }
}

pub fn sigmoid_backward_inplace<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        *g *= o * (T::one() - o);
    }
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (t.h * 2, t.w * 2);
    let mut out = Tensor::zeros(t.c, t.n, h2, w2);
    for (src, dst) in t.data.chunks_exact(t.h * t.w).zip(out.data.chunks_exact_mut(h2 * w2)) {
        for (srow, pair) in src.chunks_exact(t.w).zip(dst.chunks_exact_mut(2 * w2)) {
            let (top, bottom) = pair.split_at_mut(w2);
            for (&v, d) in srow.iter().zip(top.chunks_exact_mut(2)) {
                d[0] = v;
                d[1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let w2 = grad_out.w;
    let mut out = Tensor::zeros(grad_out.c, grad_out.n, h, w);
    for (src, dst) in grad_out.data.chunks_exact(4 * h * w).zip(out.data.chunks_exact_mut(h * w)) {
        for (pair, drow) in src.chunks_exact(2 * w2).zip(dst.chunks_exact_mut(w)) {
            let (top, bottom) = pair.split_at(w2);
            for ((d, a), b) in drow.iter_mut().zip(top.chunks_exact(2)).zip(bottom.chunks_exact(2)) {
                *d = (a[0] + a[1]) + (b[0] + b[1]);
            }
        }
    }
    out
}

/// Spatial mean: `[C, N, H, W] -> [C, N, 1, 1]`.
pub fn avg_pool<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let p = t.plane();
    let inv = T::one() / T::from_f64(p as f64);
    let data = t
        .data
        .chunks(p)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor {
        c: t.c,
        n: t.n,
        h: 1,
        w: 1,
        data,
    }
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let p = h * w;
    let inv = T::one() / T::from_f64(p as f64);
    let mut data = Vec::with_capacity(grad_out.len() * p);
    for &g in &grad_out.data {
        data.extend(std::iter::repeat_n(g * inv, p));
    }
    Tensor {
        c: grad_out.c,
        n: grad_out.n,
        h,
        w,
        data,
    }
}

/// Reinterprets a `[C*H*W, N]` feature matrix as a `[C, N, H, W]` grid.
pub fn unflatten<T: Scalar>(flat: &Tensor<T>, c: usize, h: usize, w: usize) -> Tensor<T> {
    debug_assert_eq!(flat.c, c * h * w);
    let n = flat.n;
    let mut out = Tensor::zeros(c, n, h, w);
    for ch in 0..c {
        for s in 0..n {
            for p in 0..h * w {
                out.data[(ch * n + s) * h * w + p] = flat.data[(ch * h * w + p) * n + s];
            }
        }
    }
    out
}

pub fn flatten<T: Scalar>(grid: &Tensor<T>) -> Tensor<T> {
    let (c, n, hw) = (grid.c, grid.n, grid.plane());
    let mut out = Tensor::zeros(c * hw, n, 1, 1);
    for ch in 0..c {
        for s in 0..n {
            for p in 0..hw {
                out.data[(ch * hw + p) * n + s] = grid.data[(ch * n + s) * hw + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f64>::from_vec(2, 3, 2, 2, (0..24).map(f64::from).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(1, 3, 2, 2, (0..12).map(|v| -f64::from(v)).collect())
            .unwrap();
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.c, 3);
        let (x, y) = cat.split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_vec(2, 2, 2, 3, (0..24).map(|v| v as f64 * 0.3).collect())
            .unwrap();
        let g = Tensor::<f64>::from_vec(2, 2, 4, 6, (0..96).map(|v| (v % 7) as f64).collect())
            .unwrap();
        let up = upsample2(&x);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn flatten_inverts_unflatten() {
        let flat =
            Tensor::<f64>::from_vec(12, 2, 1, 1, (0..24).map(f64::from).collect()).unwrap();
        let grid = unflatten(&flat, 3, 2, 2);
        assert_eq!(flatten(&grid), flat);
    }

    #[test]
    fn stack_and_sample_roundtrip() {
        let a = Tensor::<f64>::from_chw(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::<f64>::from_chw(2, 2, 2, (8..16).map(f64::from).collect()).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.sample_chw(0), a.data);
        assert_eq!(s.sample_chw(1), b.data);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
