//! Dense NCHW tensors and the CPU kernels the network is built from.
//!
//! Every kernel is generic over [`Scalar`] so that the same code runs in
//! `f32` for inference and in `f64` when gradients are checked against finite
//! differences. Accumulation always happens in the element type. Naive
//! reference implementations of the fast kernels live in [`reference`].

mod conv;
mod gemm;
mod norm;
mod ops;
pub mod reference;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{col2im, conv2d, im2col, ConvParams};
pub use gemm::gemm;
pub use norm::{batch_norm_infer, BnParams, BN_EPS};
pub use ops::{
    activation, channel_stats, global_avg_pool, hard_sigmoid, logistic, matmul, softmax_in_place,
    softmax_rows, Activation, CHANNEL_STAT_EPS,
};
pub(crate) use ops::activation_in_place;

/// Element type of tensors: `f32` for deployment, `f64` for oracles.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self;

    /// `c[m x n] (+)= a[m x k] * b[k x n]`, all row-major with explicit leading
    /// dimensions. Implementations must add the `k` products of each output
    /// element in a fixed order so results are bitwise reproducible.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        c: &mut [Self],
        ldc: usize,
        accumulate: bool,
    ) {
        gemm::gemm_generic(m, n, k, a, lda, b, ldb, c, ldc, accumulate)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn gemm(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
        accumulate: bool,
    ) {
        gemm::gemm_f32(m, n, k, a, lda, b, ldb, c, ldc, accumulate)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(v: f64) -> Self {
        v
    }
}

/// Row-major NCHW activation or weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "data length {} does not equal n*c*h*w = {n}*{c}*{h}*{w}",
                data.len()
            )));
        }
        if c > 0 && (n == 0 || h == 0 || w == 0) {
            return Err(Error::shape(format!(
                "n, h and w must be positive, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `c x (h*w)` plane block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.c * self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.c * self.h * self.w;
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_vec(n, c, h, w, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("finite cast"))
                .collect(),
        }
    }

    /// Elementwise sum with a tensor of identical shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot add tensors of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major dense matrix used for fully connected layers and attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not equal rows*cols = {rows}*{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("finite cast"))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "max_abs_diff shape mismatch"
        );
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}
