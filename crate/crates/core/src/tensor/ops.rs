use serde::{Deserialize, Serialize};

use super::{Matrix, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Stabiliser added to the variance before the square root in [`channel_stats`].
pub const CHANNEL_STAT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact error-function form.
    Gelu,
    /// `clamp((x + 3) / 6, 0, 1)`.
    HardSigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::HardSigmoid => hard_sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::HardSigmoid => "hard_sigmoid",
        }
    }
}

#[inline]
pub fn hard_sigmoid<T: Scalar>(x: T) -> T {
    ((x + T::lit(3.0)) / T::lit(6.0)).max(T::zero()).min(T::one())
}

/// Numerically stable `1 / (1 + exp(-x))`.
#[inline]
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    x.map(|v| kind.apply(v))
}

pub(crate) fn activation_in_place<T: Scalar>(x: &mut Tensor4<T>, kind: Activation) {
    for v in x.data_mut() {
        *v = kind.apply(*v);
    }
}

/// Spatial mean per `(n, c)`, shaped `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let plane = x.spatial();
    let denom = T::from(plane).unwrap();
    let data = x
        .data()
        .chunks(plane.max(1))
        .take(x.n() * x.c())
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor4::from_vec(x.n(), x.c(), 1, 1, data).expect("pooled shape")
}

/// Population mean and `sqrt(var + CHANNEL_STAT_EPS)` over the spatial
/// positions of every `(n, c)` plane, each returned as an `n x c` matrix.
pub fn channel_stats<T: Scalar>(x: &Tensor4<T>) -> (Matrix<T>, Matrix<T>) {
    let plane = x.spatial();
    let denom = T::from(plane).unwrap();
    let eps = T::lit(CHANNEL_STAT_EPS);
    let mut mean = Matrix::zeros(x.n(), x.c());
    let mut std = Matrix::zeros(x.n(), x.c());
    for (i, p) in x.data().chunks(plane.max(1)).take(x.n() * x.c()).enumerate() {
        let m = p.iter().fold(T::zero(), |a, &v| a + v) / denom;
        let var = p.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / denom;
        mean.data_mut()[i] = m;
        std.data_mut()[i] = (var + eps).sqrt();
    }
    (mean, std)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    super::gemm(
        a.rows(),
        b.cols(),
        a.cols(),
        a.data(),
        a.cols(),
        b.data(),
        b.cols(),
        out.data_mut(),
        b.cols(),
        false,
    );
    Ok(out)
}
