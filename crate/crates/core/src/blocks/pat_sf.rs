use super::{channel_concat, channel_split, conv_branch, Linear, PartialSplit};
use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvParams, Scalar, Tensor4};

/// Channels per attention head in the model builder.
pub const HEAD_DIM: usize = 32;

/// Learned additive bias indexed by the relative offset between two tokens of
/// an `h x w` grid, one `(2h-1) x (2w-1)` table per head.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosBias<T = f32> {
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub table: Vec<T>,
}

impl<T: Scalar> RelPosBias<T> {
    pub fn zeros(heads: usize, h: usize, w: usize) -> Self {
        Self {
            heads,
            h,
            w,
            table: vec![T::zero(); Self::table_len(heads, h, w)],
        }
    }

    pub fn table_len(heads: usize, h: usize, w: usize) -> usize {
        heads * (2 * h - 1) * (2 * w - 1)
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Flat table index of the bias between query token `i` and key token `j`.
    #[inline]
    pub fn offset(&self, head: usize, i: usize, j: usize) -> usize {
        let (yi, xi) = (i / self.w, i % self.w);
        let (yj, xj) = (j / self.w, j % self.w);
        let dy = yi + self.h - 1 - yj;
        let dx = xi + self.w - 1 - xj;
        (head * (2 * self.h - 1) + dy) * (2 * self.w - 1) + dx
    }

    pub fn cast<U: Scalar>(&self) -> RelPosBias<U> {
        RelPosBias {
            heads: self.heads,
            h: self.h,
            w: self.w,
            table: self.table.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

/// Partial self-attention block: 3x3 convolution on the partial slice and
/// multi-head self-attention over the spatial tokens of the untouched slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PatSfParams<T = f32> {
    /// `None` iff `c_p == 0`.
    pub conv3: Option<ConvParams<T>>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
    pub rpe: RelPosBias<T>,
}

impl<T: Scalar> PatSfParams<T> {
    pub fn c_u(&self) -> usize {
        self.q.out_features()
    }

    pub fn head_dim(&self) -> usize {
        self.c_u() / self.heads
    }

    pub fn validate(&self, s: PartialSplit) -> Result<()> {
        let c_u = s.c_u();
        for (name, l) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            if l.in_features() != c_u || l.out_features() != c_u {
                return Err(Error::shape(format!(
                    "{name} projection is {}x{}, expected {c_u}x{c_u}",
                    l.out_features(),
                    l.in_features()
                )));
            }
        }
        if self.heads == 0 || !c_u.is_multiple_of(self.heads) || self.rpe.heads != self.heads {
            return Err(Error::shape(format!(
                "{} heads (position table has {}) do not divide {c_u} channels",
                self.heads, self.rpe.heads
            )));
        }
        if self.rpe.table.len() != RelPosBias::<T>::table_len(self.heads, self.rpe.h, self.rpe.w) {
            return Err(Error::shape("relative position table has the wrong length"));
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

    pub fn cast<U: Scalar>(&self) -> PatSfParams<U> {
        PatSfParams {
            conv3: self.conv3.as_ref().map(ConvParams::cast),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            heads: self.heads,
            rpe: self.rpe.cast(),
        }
    }
}

/// Intermediate values of one attention evaluation over `t` tokens.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    /// `c_u x t`, channel-major.
    pub values: Vec<T>,
    /// `heads x t x t`, row `i` holds the weights query `i` puts on each key.
    pub probs: Vec<T>,
    /// Pre-projection output, `c_u x t`.
    pub mixed: Vec<T>,
}

/// Runs multi-head attention over one sample's channel-major `c_u x t` tokens
/// and returns everything before the output projection.
pub fn self_attention<T: Scalar>(tokens: &[T], p: &PatSfParams<T>) -> SelfAttention<T> {
    let c_u = p.c_u();
    let t = p.rpe.tokens();
    let d = p.head_dim();
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let q = p.q.apply_cols(tokens, t);
    let k = p.k.apply_cols(tokens, t);
    let values = p.v.apply_cols(tokens, t);

    let mut probs = vec![T::zero(); p.heads * t * t];
    let mut mixed = vec![T::zero(); c_u * t];
    let mut qt = vec![T::zero(); t * d];
    let mut at = vec![T::zero(); t * t];
    for head in 0..p.heads {
        let rows = head * d * t..(head + 1) * d * t;
        let (qh, kh, vh) = (&q[rows.clone()], &k[rows.clone()], &values[rows.clone()]);
        for c in 0..d {
            for i in 0..t {
                qt[i * d + c] = qh[c * t + i];
            }
        }
        let a = &mut probs[head * t * t..(head + 1) * t * t];
        gemm(t, t, d, &qt, d, kh, t, a, t, false);
        for i in 0..t {
            let row = &mut a[i * t..(i + 1) * t];
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * scale + p.rpe.table[p.rpe.offset(head, i, j)];
            }
            crate::tensor::softmax_in_place(row);
        }
        for i in 0..t {
            for j in 0..t {
                at[j * t + i] = a[i * t + j];
            }
        }
        gemm(d, t, t, vh, t, &at, t, &mut mixed[rows], t, false);
    }
    SelfAttention {
        values,
        probs,
        mixed,
    }
}

/// Attention output for one sample's tokens, `c_u x t`.
pub fn attention_tokens<T: Scalar>(tokens: &[T], p: &PatSfParams<T>) -> Vec<T> {
    let att = self_attention(tokens, p);
    p.o.apply_cols(&att.mixed, p.rpe.tokens())
}

/// `conv3(x_p) ++ attention(x_u)`.
pub fn pat_sf_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &PatSfParams<T>,
    s: PartialSplit,
) -> Result<Tensor4<T>> {
    p.validate(s)?;
    if (x.h(), x.w()) != (p.rpe.h, p.rpe.w) {
        return Err(Error::shape(format!(
            "spatial extent {}x{} does not match the {}x{} relative position table",
            x.h(),
            x.w(),
            p.rpe.h,
            p.rpe.w
        )));
    }
    let (xp, mut xu) = channel_split(x, s)?;
    let yp = conv_branch(&xp, p.conv3.as_ref())?;
    if s.c_u() > 0 {
        for n in 0..xu.n() {
            let out = attention_tokens(xu.sample(n), p);
            xu.sample_mut(n).copy_from_slice(&out);
        }
    }
    channel_concat(&yp, &xu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        }
    }

    fn params(c_u: usize, heads: usize, h: usize, w: usize, seed: u64) -> PatSfParams {
        let mut r = lcg(seed);
        let mut lin = || Linear::new(Matrix::from_fn(c_u, c_u, |_, _| r() * 0.5), (0..c_u).map(|_| 0.1).collect()).unwrap();
        let (q, k, v, o) = (lin(), lin(), lin(), lin());
        let mut rpe = RelPosBias::zeros(heads, h, w);
        let mut r = lcg(seed + 1);
        rpe.table.iter_mut().for_each(|b| *b = r());
        PatSfParams { conv3: None, q, k, v, o, heads, rpe }
    }

    #[test]
    fn offset_covers_table_and_is_translation_invariant() {
        let rpe = RelPosBias::<f32>::zeros(2, 3, 4);
        assert_eq!(rpe.offset(0, 0, 0), 2 * 7 + 3);
        assert_eq!(rpe.offset(0, 0, 11), 0);
        assert_eq!(rpe.offset(1, 11, 0), 2 * 5 * 7 - 1);
        // (0,0)->(1,1) and (1,2)->(2,3) share the same offset.
        assert_eq!(rpe.offset(0, 0, 5), rpe.offset(0, 6, 11));
    }

    #[test]
    fn single_token_attention_is_a_projection_chain() {
        let p = params(4, 2, 1, 1, 3);
        let x = [0.3f32, -1.2, 0.8, 2.0];
        let out = attention_tokens(&x, &p);
        let want = p.o.apply_vec(&p.v.apply_vec(&x));
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_logits_average_the_values() {
        let mut p = params(4, 2, 2, 3, 5);
        p.q = Linear::zeros(4, 4);
        p.rpe.table.iter_mut().for_each(|b| *b = 0.0);
        let tokens: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).cos()).collect();
        let att = self_attention(&tokens, &p);
        for c in 0..4 {
            let mean: f32 = att.values[c * 6..(c + 1) * 6].iter().sum::<f32>() / 6.0;
            for i in 0..6 {
                assert!((att.mixed[c * 6 + i] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let p = params(4, 2, 2, 2, 1);
        let x = Tensor4::<f32>::zeros(1, 4, 3, 3);
        let err = pat_sf_forward(&x, &p, PartialSplit::new(4, 0).unwrap()).unwrap_err();
        assert!(err.to_string().contains("3x3"));
    }
}
