use super::{channel_concat, channel_split, conv_branch, Linear, PartialSplit};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, logistic, ConvParams, Matrix, Scalar, Tensor4};

/// Partial channel-attention block: 3x3 convolution on the partial slice and a
/// Gaussian squeeze-excitation gate on the untouched slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PatChParams<T = f32> {
    /// `c_p -> c_p`, 3x3, stride 1, pad 1, no bias. `None` iff `c_p == 0`.
    pub conv3: Option<ConvParams<T>>,
    /// `hidden x 2*c_u`, reads `[mean; std]`.
    pub fc1: Linear<T>,
    /// `c_u x hidden`.
    pub fc2: Linear<T>,
}

/// Bottleneck width of the gate head: `max(8, c_u / reduction)`.
pub fn se_hidden(c_u: usize, reduction: usize) -> usize {
    (c_u / reduction.max(1)).max(8)
}

impl<T: Scalar> PatChParams<T> {
    pub fn c_u(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn validate(&self, s: PartialSplit) -> Result<()> {
        let c_u = s.c_u();
        if self.fc1.in_features() != 2 * c_u
            || self.fc2.out_features() != c_u
            || self.fc2.in_features() != self.fc1.out_features()
        {
            return Err(Error::shape(format!(
                "gate head {}x{} -> {}x{} does not fit {c_u} untouched channels",
                self.fc1.out_features(),
                self.fc1.in_features(),
                self.fc2.out_features(),
                self.fc2.in_features()
            )));
        }
        match (&self.conv3, s.c_p()) {
            (None, 0) => Ok(()),
            (Some(c), cp) if c.in_ch() == cp && c.out_ch() == cp => Ok(()),
            _ => Err(Error::shape(format!(
                "partial convolution does not map {} channels to themselves",
                s.c_p()
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PatChParams<U> {
        PatChParams {
            conv3: self.conv3.as_ref().map(ConvParams::cast),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

/// Per-sample gate over the untouched channels, `n x c_u`, every entry in `[0, 1]`.
///
/// `z = [mean; std]` of each channel, `gate = logistic(W2 relu(W1 z + b1) + b2)`.
pub fn gaussian_se_gate<T: Scalar>(x_u: &Tensor4<T>, p: &PatChParams<T>) -> Result<Matrix<T>> {
    let c_u = p.c_u();
    if x_u.c() != c_u {
        return Err(Error::shape(format!(
            "untouched channel dimension c = {} does not match gate width {c_u}",
            x_u.c()
        )));
    }
    let (mean, std) = channel_stats(x_u);
    let mut gate = Matrix::zeros(x_u.n(), c_u);
    let mut z = Vec::with_capacity(2 * c_u);
    for n in 0..x_u.n() {
        z.clear();
        z.extend_from_slice(mean.row(n));
        z.extend_from_slice(std.row(n));
        let hidden: Vec<T> = p
            .fc1
            .apply_vec(&z)
            .into_iter()
            .map(|v| v.max(T::zero()))
            .collect();
        let logits = p.fc2.apply_vec(&hidden);
        for (g, l) in gate.data_mut()[n * c_u..(n + 1) * c_u].iter_mut().zip(logits) {
            *g = logistic(l);
        }
    }
    Ok(gate)
}

/// `conv3(x_p) ++ x_u * gate(x_u)`.
pub fn pat_ch_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &PatChParams<T>,
    s: PartialSplit,
) -> Result<Tensor4<T>> {
    p.validate(s)?;
    let (xp, mut xu) = channel_split(x, s)?;
    let yp = conv_branch(&xp, p.conv3.as_ref())?;
    if s.c_u() > 0 {
        let gate = gaussian_se_gate(&xu, p)?;
        let plane = xu.spatial();
        for n in 0..xu.n() {
            let g = gate.row(n).to_vec();
            for (c, chunk) in xu.sample_mut(n).chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v *= g[c];
                }
            }
        }
    }
    channel_concat(&yp, &xu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::reference;

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        }
    }

    fn params(c: usize, c_p: usize, zero_gate: bool, seed: u64) -> PatChParams {
        let mut r = lcg(seed);
        let c_u = c - c_p;
        let hidden = se_hidden(c_u, 4);
        let mut lin = |o: usize, i: usize| {
            if zero_gate {
                Linear::zeros(o, i)
            } else {
                Linear::new(Matrix::from_fn(o, i, |_, _| r()), (0..o).map(|_| 0.0).collect()).unwrap()
            }
        };
        let fc1 = lin(hidden, 2 * c_u);
        let fc2 = lin(c_u, hidden);
        let mut r = lcg(seed + 7);
        let conv3 = (c_p > 0).then(|| {
            ConvParams::new(Tensor4::from_fn(c_p, c_p, 3, 3, |_, _, _, _| r() * 0.3), None, 1, 1, 1).unwrap()
        });
        PatChParams { conv3, fc1, fc2 }
    }

    fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut r = lcg(seed);
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| r() * 2.0)
    }

    #[test]
    fn zero_head_gives_half_gate() {
        let p = params(8, 2, true, 1);
        let x = input(2, 8, 4, 4, 2);
        let (_, xu) = channel_split(&x, PartialSplit::new(8, 2).unwrap()).unwrap();
        let g = gaussian_se_gate(&xu, &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));

        let y = pat_ch_forward(&x, &p, PartialSplit::new(8, 2).unwrap()).unwrap();
        for n in 0..2 {
            for (a, b) in y.sample(n)[32..].iter().zip(&x.sample(n)[32..]) {
                assert_eq!(*a, *b * 0.5);
            }
        }
    }

    #[test]
    fn saturated_bias_drives_gate_to_one() {
        let mut p = params(8, 2, true, 1);
        p.fc2.bias.iter_mut().for_each(|b| *b = 20.0);
        let xu = input(1, 6, 4, 4, 3);
        let g = gaussian_se_gate(&xu, &p).unwrap();
        assert!(g.data().iter().all(|&v| v as f64 > 1.0 - 1e-8));
    }

    #[test]
    fn full_partial_ratio_reduces_to_plain_conv() {
        let p = params(4, 4, false, 5);
        let x = input(1, 4, 5, 5, 6);
        let y = pat_ch_forward(&x, &p, PartialSplit::new(4, 4).unwrap()).unwrap();
        let want = crate::tensor::conv2d(&x, p.conv3.as_ref().unwrap()).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn gate_matches_scalar_recomputation() {
        let p = params(10, 2, false, 11);
        let xu = input(2, 8, 4, 4, 12);
        let got = gaussian_se_gate(&xu, &p).unwrap();
        let (means, stds) = reference::channel_stats(&xu, 1e-5);
        for n in 0..2 {
            let z: Vec<f64> = means[n * 8..(n + 1) * 8]
                .iter()
                .chain(&stds[n * 8..(n + 1) * 8])
                .cloned()
                .collect();
            let hidden: Vec<f64> = (0..p.hidden())
                .map(|j| {
                    let s: f64 = (0..16).map(|i| p.fc1.weight.at(j, i) as f64 * z[i]).sum();
                    (s + p.fc1.bias[j] as f64).max(0.0)
                })
                .collect();
            for c in 0..8 {
                let l: f64 = (0..p.hidden()).map(|j| p.fc2.weight.at(c, j) as f64 * hidden[j]).sum::<f64>()
                    + p.fc2.bias[c] as f64;
                let want = 1.0 / (1.0 + (-l).exp());
                assert!((got.at(n, c) as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let p = params(8, 2, false, 1);
        let x = input(1, 12, 3, 3, 1);
        assert!(pat_ch_forward(&x, &p, PartialSplit::new(12, 3).unwrap()).is_err());
    }
}
