use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Epsilon used by every batch-norm layer the model builder creates.
pub const BN_EPS: f64 = 1e-5;

/// Inference-mode batch normalisation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        eps: T,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors differ in length: gamma {c}, beta {}, mean {}, var {}",
                beta.len(),
                running_mean.len(),
                running_var.len()
            )));
        }
        if eps < T::zero() || running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument(
                "batch-norm variance and eps must be non-negative".into(),
            ));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(c: usize, eps: T) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = x * scale + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batch_norm_infer<T: Scalar>(x: &Tensor4<T>, p: &BnParams<T>) -> Result<Tensor4<T>> {
    if x.c() != p.channels() {
        return Err(Error::shape(format!(
            "input channel dimension c = {} does not match batch-norm length {}",
            x.c(),
            p.channels()
        )));
    }
    let scale: Vec<T> = p
        .gamma
        .iter()
        .zip(&p.running_var)
        .map(|(&g, &v)| g / (v + p.eps).sqrt())
        .collect();
    let plane = x.spatial();
    let mut out = x.clone();
    for n in 0..x.n() {
        let s = out.sample_mut(n);
        for c in 0..p.channels() {
            let (mean, sc, beta) = (p.running_mean[c], scale[c], p.beta[c]);
            for v in &mut s[c * plane..(c + 1) * plane] {
                *v = (*v - mean) * sc + beta;
            }
        }
    }
    Ok(out)
}
