//! Partial-attention blocks and the partial/dense/depthwise convolution
//! baselines they are compared against.
//!
//! Every block routes the first `c_p` channels through a convolution and the
//! remaining `c_total - c_p` ("untouched") channels through an attention
//! function, then concatenates the two with the convolution branch first.

mod pat_ch;
mod pat_sf;
mod pat_sp;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvParams, Matrix, Scalar, Tensor4};

pub use pat_ch::{gaussian_se_gate, pat_ch_forward, se_hidden, PatChParams};
pub use pat_sf::{
    attention_tokens, pat_sf_forward, self_attention, PatSfParams, RelPosBias, SelfAttention,
    HEAD_DIM,
};
pub use pat_sp::{apply_spatial_gate, pat_sp_forward, PatSpParams};

/// Which channels go to the convolution branch: always the first `c_p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartialSplit {
    c_total: usize,
    c_p: usize,
}

impl PartialSplit {
    pub fn new(c_total: usize, c_p: usize) -> Result<Self> {
        if c_p > c_total {
            return Err(Error::InvalidArgument(format!(
                "partial channel count {c_p} exceeds total {c_total}"
            )));
        }
        Ok(Self { c_total, c_p })
    }

    /// `c_p = c_total * num / den`, which must be an integer.
    pub fn from_ratio(c_total: usize, num: usize, den: usize) -> Result<Self> {
        if den == 0 || num > den || !(c_total * num).is_multiple_of(den) {
            return Err(Error::InvalidArgument(format!(
                "ratio {num}/{den} does not split {c_total} channels exactly"
            )));
        }
        Self::new(c_total, c_total * num / den)
    }

    pub fn c_total(&self) -> usize {
        self.c_total
    }

    pub fn c_p(&self) -> usize {
        self.c_p
    }

    /// Number of untouched channels.
    pub fn c_u(&self) -> usize {
        self.c_total - self.c_p
    }

    fn check(&self, x_c: usize) -> Result<()> {
        if x_c != self.c_total {
            return Err(Error::shape(format!(
                "input channel dimension c = {x_c} does not match split total {}",
                self.c_total
            )));
        }
        Ok(())
    }
}

/// Splits `x` into the convolution slice `[0, c_p)` and the untouched slice.
pub fn channel_split<T: Scalar>(
    x: &Tensor4<T>,
    s: PartialSplit,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    s.check(x.c())?;
    let plane = x.spatial();
    let (mut xp, mut xu) = (
        Vec::with_capacity(x.n() * s.c_p() * plane),
        Vec::with_capacity(x.n() * s.c_u() * plane),
    );
    for n in 0..x.n() {
        let sample = x.sample(n);
        xp.extend_from_slice(&sample[..s.c_p() * plane]);
        xu.extend_from_slice(&sample[s.c_p() * plane..]);
    }
    Ok((
        Tensor4::from_vec(x.n(), s.c_p(), x.h(), x.w(), xp)?,
        Tensor4::from_vec(x.n(), s.c_u(), x.h(), x.w(), xu)?,
    ))
}

/// Stacks two tensors along channels, `xp` first.
pub fn channel_concat<T: Scalar>(xp: &Tensor4<T>, xu: &Tensor4<T>) -> Result<Tensor4<T>> {
    if xp.c() == 0 {
        return Ok(xu.clone());
    }
    if xu.c() == 0 {
        return Ok(xp.clone());
    }
    if (xp.n(), xp.h(), xp.w()) != (xu.n(), xu.h(), xu.w()) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}: n, h, w must match",
            xp.shape(),
            xu.shape()
        )));
    }
    let mut data = Vec::with_capacity(xp.len() + xu.len());
    for n in 0..xp.n() {
        data.extend_from_slice(xp.sample(n));
        data.extend_from_slice(xu.sample(n));
    }
    Tensor4::from_vec(xp.n(), xp.c() + xu.c(), xp.h(), xp.w(), data)
}

/// Fully connected layer `y = W x + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output features",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![T::zero(); out],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    /// Applies the layer to a single feature vector.
    pub fn apply_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_features(), "linear input length");
        (0..self.out_features())
            .map(|o| {
                self.weight
                    .row(o)
                    .iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// Applies the layer to every column of a channel-major `in x cols` block,
    /// producing `out x cols`.
    pub fn apply_cols(&self, x: &[T], cols: usize) -> Vec<T> {
        let (out_f, in_f) = (self.out_features(), self.in_features());
        assert_eq!(x.len(), in_f * cols, "linear input block size");
        let mut out = Vec::with_capacity(out_f * cols);
        for &b in &self.bias {
            out.extend(std::iter::repeat_n(b, cols));
        }
        crate::tensor::gemm(
            out_f,
            cols,
            in_f,
            self.weight.data(),
            in_f,
            x,
            cols,
            &mut out,
            cols,
            true,
        );
        out
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

/// Partial convolution: 3x3 convolution on the first `c_p` channels, identity
/// on the rest.
pub fn pconv_forward<T: Scalar>(
    x: &Tensor4<T>,
    conv3: Option<&ConvParams<T>>,
    s: PartialSplit,
) -> Result<Tensor4<T>> {
    let (xp, xu) = channel_split(x, s)?;
    let yp = conv_branch(&xp, conv3)?;
    channel_concat(&yp, &xu)
}

pub(crate) fn conv_branch<T: Scalar>(
    xp: &Tensor4<T>,
    conv3: Option<&ConvParams<T>>,
) -> Result<Tensor4<T>> {
    match conv3 {
        Some(p) => conv2d(xp, p),
        None if xp.c() == 0 => Ok(xp.clone()),
        None => Err(Error::InvalidArgument(format!(
            "convolution branch has {} channels but no weights",
            xp.c()
        ))),
    }
}
