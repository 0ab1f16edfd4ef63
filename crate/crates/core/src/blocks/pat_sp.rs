use super::PartialSplit;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, hard_sigmoid, ConvParams, Scalar, Tensor4};

/// Partial spatial-attention block. The only learned operator is a `1x1`
/// convolution from all channels to a single spatial map.
#[derive(Clone, Debug, PartialEq)]
pub struct PatSpParams<T = f32> {
    /// `c_total -> 1`, with bias.
    pub map: ConvParams<T>,
}

impl<T: Scalar> PatSpParams<T> {
    pub fn validate(&self, s: PartialSplit) -> Result<()> {
        if self.map.out_ch() != 1 || !self.map.is_pointwise() || self.map.in_ch() != s.c_total() {
            return Err(Error::shape(format!(
                "spatial map must be a 1x1 convolution {} -> 1, got {} -> {} (k = {})",
                s.c_total(),
                self.map.in_ch(),
                self.map.out_ch(),
                self.map.kernel()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PatSpParams<U> {
        PatSpParams {
            map: self.map.cast(),
        }
    }
}

/// `x_p ++ x_u * hard_sigmoid(map(x))`, the map broadcast over channels.
pub fn pat_sp_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &PatSpParams<T>,
    s: PartialSplit,
) -> Result<Tensor4<T>> {
    p.validate(s)?;
    let logits = conv2d(x, &p.map)?;
    let mut y = x.clone();
    apply_spatial_gate(&mut y, logits.data(), s)?;
    Ok(y)
}

/// Multiplies the untouched channels of `x` in place by
/// `hard_sigmoid(logits)`, where `logits` holds one `h x w` map per sample.
pub fn apply_spatial_gate<T: Scalar>(
    x: &mut Tensor4<T>,
    logits: &[T],
    s: PartialSplit,
) -> Result<()> {
    if x.c() != s.c_total() {
        return Err(Error::shape(format!(
            "input channel dimension c = {} does not match split total {}",
            x.c(),
            s.c_total()
        )));
    }
    let plane = x.spatial();
    if logits.len() != x.n() * plane {
        return Err(Error::shape(format!(
            "spatial logits hold {} values, expected n*h*w = {}",
            logits.len(),
            x.n() * plane
        )));
    }
    for n in 0..x.n() {
        let gate: Vec<T> = logits[n * plane..(n + 1) * plane]
            .iter()
            .map(|&l| hard_sigmoid(l))
            .collect();
        let untouched = &mut x.sample_mut(n)[s.c_p() * plane..];
        for chunk in untouched.chunks_mut(plane) {
            for (v, &g) in chunk.iter_mut().zip(&gate) {
                *v *= g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Tensor4 {
        Tensor4::from_fn(2, 8, 5, 5, |n, c, y, x| ((n * 200 + c * 25 + y * 5 + x) as f32 * 0.71).sin() * 3.0)
    }

    fn map(weight: f32, bias: f32) -> PatSpParams {
        PatSpParams {
            map: ConvParams::pointwise(Tensor4::full(1, 8, 1, 1, weight), Some(vec![bias])).unwrap(),
        }
    }

    #[test]
    fn zero_map_halves_untouched_channels() {
        let x = input();
        let s = PartialSplit::new(8, 2).unwrap();
        let y = pat_sp_forward(&x, &map(0.0, 0.0), s).unwrap();
        for n in 0..2 {
            assert_eq!(y.sample(n)[..50], x.sample(n)[..50]);
            for (a, b) in y.sample(n)[50..].iter().zip(&x.sample(n)[50..]) {
                assert_eq!(*a, *b * 0.5);
            }
        }
    }

    #[test]
    fn saturated_map_is_identity() {
        let x = input();
        let y = pat_sp_forward(&x, &map(0.0, 10.0), PartialSplit::new(8, 2).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let x = input();
        let weights: Vec<f32> = (0..8).map(|i| (i as f32 - 3.5) * 0.2).collect();
        let p = PatSpParams {
            map: ConvParams::pointwise(Tensor4::from_vec(1, 8, 1, 1, weights.clone()).unwrap(), Some(vec![0.3]))
                .unwrap(),
        };
        let y = pat_sp_forward(&x, &p, PartialSplit::new(8, 2).unwrap()).unwrap();
        for n in 0..2 {
            for yy in 0..5 {
                for xx in 0..5 {
                    let l: f64 = (0..8).map(|c| weights[c] as f64 * x.at(n, c, yy, xx) as f64).sum::<f64>() + 0.3;
                    let a = ((l + 3.0) / 6.0).clamp(0.0, 1.0);
                    for c in 0..8 {
                        let want = if c < 2 { x.at(n, c, yy, xx) as f64 } else { x.at(n, c, yy, xx) as f64 * a };
                        assert!((y.at(n, c, yy, xx) as f64 - want).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn map_must_read_every_channel() {
        let p = PatSpParams {
            map: ConvParams::pointwise(Tensor4::full(1, 6, 1, 1, 0.0f32), Some(vec![0.0])).unwrap(),
        };
        assert!(pat_sp_forward(&input(), &p, PartialSplit::new(8, 2).unwrap()).is_err());
    }
}
