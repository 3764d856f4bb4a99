//! Dense NCHW tensors and the layer primitives the network is built from.
//!
//! Every layer is a pure function pair: a forward pass and a backward pass
//! that maps an upstream gradient to gradients for the input and parameters.
//! There is no autodiff graph; the network module wires the passes together.

mod conv;
mod gemm;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use conv::{
    conv2d_backward, conv2d_forward, deconv4_backward, deconv4_forward, deconv_backward,
    deconv_forward,
};
pub use pool::{maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, PoolIndices};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// (batch, channels, rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    /// Panics if any dimension is zero; use [`Shape::try_new`] for untrusted dims.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::try_new(n, c, h, w).expect("tensor dimensions must be >= 1")
    }

    pub fn try_new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "tensor dimensions must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Independent standard-normal entries scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.len()).map(|_| T::of(normal.sample(rng))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.shape.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous `h*w` slice for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure_same_shape("dot", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        ensure_same_shape("axpy", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(T::one(), other)
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch item `n` into a standalone (1, c, h, w) tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        Self {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates tensors of identical (c, h, w) along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty tensor list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::invalid(format!(
                    "cannot stack {ts} onto {s}: channel/spatial dims differ"
                )));
            }
            data.extend_from_slice(&t.data);
            n += ts.n;
        }
        Ok(Self {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }
}

pub(crate) fn ensure_same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

/// Kernel, bias and geometry of a convolution or transposed convolution.
///
/// Kernels are always laid out `(out_c, in_c, kh, kw)`, for transposed
/// convolutions too.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernels: Tensor<T>, bias: Vec<T>, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if bias.len() != kernels.shape().n {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                kernels.shape().n
            )));
        }
        Ok(Self {
            kernels,
            bias,
            stride,
            pad,
        })
    }

    /// He-scaled normal kernels (std = sqrt(2 / fan_in)) and zero bias.
    pub fn he_normal<R: Rng + ?Sized>(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let kernels = Tensor::random_normal(Shape::new(out_c, in_c, k, k), (2.0 / fan_in).sqrt(), rng);
        Self {
            kernels,
            bias: vec![T::zero(); out_c],
            stride,
            pad,
        }
    }

    /// Channel-diagonal bilinear interpolation kernel for a transposed
    /// convolution upsampling by `factor` (kernel `2 * factor`, pad `factor / 2`).
    pub fn bilinear_upsample(channels: usize, factor: usize) -> Self {
        let k = 2 * factor;
        let center = factor as f64 - 0.5;
        let taps: Vec<f64> = (0..k)
            .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
            .collect();
        let mut kernels = Tensor::zeros(Shape::new(channels, channels, k, k));
        for c in 0..channels {
            for ky in 0..k {
                for kx in 0..k {
                    *kernels.at_mut(c, c, ky, kx) = T::of(taps[ky] * taps[kx]);
                }
            }
        }
        Self {
            kernels,
            bias: vec![T::zero(); channels],
            stride: factor,
            pad: factor / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape().c
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: Tensor::zeros(self.kernels.shape()),
            bias: vec![T::zero(); self.bias.len()],
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            kernels: self.kernels.cast(),
            bias: self.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernels.shape().len() + self.bias.len()
    }
}

/// Gradients of one layer: w.r.t. its input, kernels and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub d_input: Tensor<T>,
    pub d_kernels: Tensor<T>,
    pub d_bias: Vec<T>,
}
