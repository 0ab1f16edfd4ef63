//! Reverse-mode gradients of the partial-attention blocks, checked against
//! central finite differences.

mod vjp;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::blocks::{
    channel_split, pat_ch_forward, pat_sf_forward, pat_sp_forward, Linear, PartialSplit,
    PatChParams, PatSfParams, PatSpParams, RelPosBias,
};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, conv2d, ConvParams, Matrix, Scalar, Tensor4};

pub use vjp::{conv2d_vjp, hard_sigmoid_grad, linear_vjp, softmax_vjp, ConvGrads, LinearGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    PatCh,
    PatSp,
    PatSf,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::PatCh, BlockKind::PatSp, BlockKind::PatSf];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::PatCh => "pat_ch",
            BlockKind::PatSp => "pat_sp",
            BlockKind::PatSf => "pat_sf",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown block `{s}` (valid blocks: pat_ch, pat_sp, pat_sf)")))
    }
}

/// Parameters of one block of any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T = f32> {
    PatCh(PatChParams<T>),
    PatSp(PatSpParams<T>),
    PatSf(PatSfParams<T>),
}

impl<T: Scalar> Block<T> {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::PatCh(_) => BlockKind::PatCh,
            Block::PatSp(_) => BlockKind::PatSp,
            Block::PatSf(_) => BlockKind::PatSf,
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, s: PartialSplit) -> Result<Tensor4<T>> {
        match self {
            Block::PatCh(p) => pat_ch_forward(x, p, s),
            Block::PatSp(p) => pat_sp_forward(x, p, s),
            Block::PatSf(p) => pat_sf_forward(x, p, s),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        match self {
            Block::PatCh(p) => Block::PatCh(p.cast()),
            Block::PatSp(p) => Block::PatSp(p.cast()),
            Block::PatSf(p) => Block::PatSf(p.cast()),
        }
    }

    /// Named parameter slices, in the order [`block_vjp`] reports gradients.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        fn lin<'a, T: Scalar>(out: &mut Vec<(String, &'a mut [T])>, name: &str, l: &'a mut Linear<T>) {
            out.push((format!("{name}.weight"), l.weight.data_mut()));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        let mut out = Vec::new();
        match self {
            Block::PatCh(p) => {
                if let Some(c) = &mut p.conv3 {
                    out.push(("conv3.weight".to_string(), c.weight.data_mut()));
                }
                lin(&mut out, "fc1", &mut p.fc1);
                lin(&mut out, "fc2", &mut p.fc2);
            }
            Block::PatSp(p) => {
                out.push(("map.weight".to_string(), p.map.weight.data_mut()));
                if let Some(b) = &mut p.map.bias {
                    out.push(("map.bias".to_string(), b));
                }
            }
            Block::PatSf(p) => {
                if let Some(c) = &mut p.conv3 {
                    out.push(("conv3.weight".to_string(), c.weight.data_mut()));
                }
                lin(&mut out, "q", &mut p.q);
                lin(&mut out, "k", &mut p.k);
                lin(&mut out, "v", &mut p.v);
                lin(&mut out, "o", &mut p.o);
                out.push(("rpe".to_string(), &mut p.rpe.table));
            }
        }
        out
    }

    /// Copies of the named parameter tensors.
    pub fn params(&self) -> Vec<(String, Vec<T>)> {
        self.clone()
            .params_mut()
            .into_iter()
            .map(|(n, v)| (n, v.to_vec()))
            .collect()
    }
}

/// Named gradients, one per parameter tensor.
pub type ParamGrads<T> = Vec<(String, Vec<T>)>;

/// Gradients of `<upstream, block(x)>` with respect to `x` and every parameter.
pub fn block_vjp<T: Scalar>(
    block: &Block<T>,
    s: PartialSplit,
    x: &Tensor4<T>,
    upstream: &Tensor4<T>,
) -> Result<(Tensor4<T>, ParamGrads<T>)> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match block output {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    match block {
        Block::PatCh(p) => vjp::pat_ch_vjp(p, s, x, upstream),
        Block::PatSp(p) => vjp::pat_sp_vjp(p, s, x, upstream),
        Block::PatSf(p) => vjp::pat_sf_vjp(p, s, x, upstream),
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Shape of a gradient probe. Every dimension is at most 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeSizes {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub c_p: usize,
    /// Attention heads, used by `pat_sf` only.
    pub heads: usize,
}

impl ProbeSizes {
    pub fn default_for(kind: BlockKind) -> Self {
        match kind {
            BlockKind::PatCh => Self { n: 1, c: 8, h: 4, w: 4, c_p: 2, heads: 1 },
            BlockKind::PatSp => Self { n: 2, c: 8, h: 4, w: 4, c_p: 2, heads: 1 },
            BlockKind::PatSf => Self { n: 1, c: 8, h: 3, w: 3, c_p: 2, heads: 2 },
        }
    }

    fn validate(&self, kind: BlockKind) -> Result<PartialSplit> {
        let dims = [self.n, self.c, self.h, self.w];
        if dims.iter().any(|&d| d == 0 || d > 8) {
            return Err(Error::InvalidArgument(format!(
                "probe sizes {dims:?} must each lie in 1..=8"
            )));
        }
        let s = PartialSplit::new(self.c, self.c_p)?;
        if kind == BlockKind::PatSf && (self.heads == 0 || s.c_u() == 0 || s.c_u() % self.heads != 0) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide {} attention channels",
                self.heads,
                s.c_u()
            )));
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    /// Arithmetic of the analytic gradients; differences are always in `f64`.
    pub precision: Precision,
    pub step: f64,
    pub tolerance: f64,
    /// Scale the largest analytic entry by 1.1 before comparing.
    pub inject_fault: bool,
}

impl GradcheckOptions {
    pub fn f32() -> Self {
        Self { precision: Precision::F32, step: 1e-3, tolerance: 1e-3, inject_fault: false }
    }

    pub fn f64() -> Self {
        Self { precision: Precision::F64, step: 1e-5, tolerance: 1e-6, inject_fault: false }
    }
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self::f32()
    }
}

/// Largest relative error of one gradient tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub kind: BlockKind,
    pub seed: u64,
    pub sizes: ProbeSizes,
    pub options: GradcheckOptions,
    /// `input` first, then the parameters.
    pub entries: Vec<GradEntry>,
    /// Draws discarded for landing near an activation kink.
    pub rejected_draws: usize,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Minimum distance of any pre-activation from a kink.
const KINK_MARGIN: f64 = 1e-2;
const MAX_DRAWS: usize = 1000;

/// Checks a block's analytic gradients at `f32` with the default tolerance.
pub fn gradcheck_block(kind: BlockKind, seed: u64, sizes: &ProbeSizes) -> Result<GradReport> {
    gradcheck_block_with(kind, seed, sizes, &GradcheckOptions::default())
}

pub fn gradcheck_block_with(
    kind: BlockKind,
    seed: u64,
    sizes: &ProbeSizes,
    opts: &GradcheckOptions,
) -> Result<GradReport> {
    let s = sizes.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected_draws = 0;
    let (block, x, u) = loop {
        let block = random_block(kind, sizes, &mut rng)?;
        let x = normal_tensor(&mut rng, sizes.n, sizes.c, sizes.h, sizes.w, 1.0);
        let u = normal_tensor(&mut rng, sizes.n, sizes.c, sizes.h, sizes.w, 1.0);
        if kink_distance(&block.cast::<f64>(), &x.cast(), s)? >= KINK_MARGIN {
            break (block, x, u);
        }
        rejected_draws += 1;
        if rejected_draws >= MAX_DRAWS {
            return Err(Error::InvalidArgument("could not draw a probe away from activation kinks".into()));
        }
    };

    let (gx, gp): (Vec<f64>, ParamGrads<f64>) = match opts.precision {
        Precision::F32 => {
            let (gx, gp) = block_vjp(&block, s, &x, &u)?;
            (widen(gx.data()), gp.into_iter().map(|(n, v)| (n, widen(&v))).collect())
        }
        Precision::F64 => {
            let (gx, gp) = block_vjp(&block.cast::<f64>(), s, &x.cast(), &u.cast())?;
            (gx.into_vec(), gp)
        }
    };
    let mut analytic = vec![("input".to_string(), gx)];
    analytic.extend(gp);
    if opts.inject_fault {
        inject_fault(&mut analytic);
    }

    let b64 = block.cast::<f64>();
    let x64 = x.cast::<f64>();
    let u64 = u.cast::<f64>();
    let objective = |b: &Block<f64>, x: &Tensor4<f64>| -> f64 {
        let y = b.forward(x, s).expect("probe shapes were validated");
        y.data().iter().zip(u64.data()).map(|(a, b)| a * b).sum()
    };
    let [n, c, h, w] = x64.shape();
    let mut numeric = vec![(
        "input".to_string(),
        finite_diff_grad(
            |v| objective(&b64, &Tensor4::from_vec(n, c, h, w, v.to_vec()).expect("probe shape")),
            x64.data(),
            opts.step,
        ),
    )];
    for (i, (name, base)) in b64.params().into_iter().enumerate() {
        let g = finite_diff_grad(
            |v| {
                let mut b = b64.clone();
                b.params_mut()[i].1.copy_from_slice(v);
                objective(&b, &x64)
            },
            &base,
            opts.step,
        );
        numeric.push((name, g));
    }

    if analytic.len() != numeric.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradient tensors but {} parameters",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut entries = Vec::with_capacity(analytic.len());
    for ((name, a), (num_name, num)) in analytic.iter().zip(&numeric) {
        if name != num_name || a.len() != num.len() {
            return Err(Error::Shape(format!("gradient `{name}` does not line up with parameter `{num_name}`")));
        }
        let max_rel_err = a
            .iter()
            .zip(num)
            .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
            .fold(0.0, f64::max);
        entries.push(GradEntry { name: name.clone(), numel: a.len(), max_rel_err });
    }
    let pass = entries.iter().all(|e| e.max_rel_err < opts.tolerance);
    Ok(GradReport {
        kind,
        seed,
        sizes: *sizes,
        options: *opts,
        entries,
        rejected_draws,
        pass,
    })
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&a| f64::from(a)).collect()
}

fn inject_fault(grads: &mut ParamGrads<f64>) {
    let mut best: Option<(usize, usize)> = None;
    let mut best_mag = -1.0;
    for (t, (_, g)) in grads.iter().enumerate() {
        for (i, &v) in g.iter().enumerate() {
            if v.abs() > best_mag {
                best_mag = v.abs();
                best = Some((t, i));
            }
        }
    }
    if let Some((t, i)) = best {
        grads[t].1[i] *= 1.1;
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, scale: f32) -> Tensor4 {
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| {
        let z: f32 = StandardNormal.sample(rng);
        z * scale
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn random_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Result<Linear> {
    let scale = 1.0 / (inp.max(1) as f32).sqrt();
    Linear::new(Matrix::from_vec(out, inp, normal_vec(rng, out * inp, scale))?, normal_vec(rng, out, 0.1))
}

fn random_conv3(rng: &mut ChaCha8Rng, c_p: usize) -> Result<Option<ConvParams>> {
    if c_p == 0 {
        return Ok(None);
    }
    let w = normal_tensor(rng, c_p, c_p, 3, 3, 1.0 / ((9 * c_p) as f32).sqrt());
    ConvParams::new(w, None, 1, 1, 1).map(Some)
}

/// Random block parameters with weights scaled by `1/sqrt(fan_in)`.
fn random_block(kind: BlockKind, sz: &ProbeSizes, rng: &mut ChaCha8Rng) -> Result<Block> {
    let c_u = sz.c - sz.c_p;
    Ok(match kind {
        BlockKind::PatCh => {
            let hidden = crate::blocks::se_hidden(c_u, 1);
            Block::PatCh(PatChParams {
                conv3: random_conv3(rng, sz.c_p)?,
                fc1: random_linear(rng, hidden, 2 * c_u)?,
                fc2: random_linear(rng, c_u, hidden)?,
            })
        }
        BlockKind::PatSp => {
            let w = normal_tensor(rng, 1, sz.c, 1, 1, 1.0 / (sz.c as f32).sqrt());
            Block::PatSp(PatSpParams { map: ConvParams::pointwise(w, Some(normal_vec(rng, 1, 0.1)))? })
        }
        BlockKind::PatSf => {
            let conv3 = random_conv3(rng, sz.c_p)?;
            let (q, k, v, o) = (
                random_linear(rng, c_u, c_u)?,
                random_linear(rng, c_u, c_u)?,
                random_linear(rng, c_u, c_u)?,
                random_linear(rng, c_u, c_u)?,
            );
            let mut rpe = RelPosBias::zeros(sz.heads, sz.h, sz.w);
            rpe.table = normal_vec(rng, rpe.table.len(), 0.5);
            Block::PatSf(PatSfParams { conv3, q, k, v, o, heads: sz.heads, rpe })
        }
    })
}

/// Distance of the nearest ReLU or hard-sigmoid input from its kink.
fn kink_distance(block: &Block<f64>, x: &Tensor4<f64>, s: PartialSplit) -> Result<f64> {
    match block {
        Block::PatCh(p) => {
            let (_, xu) = channel_split(x, s)?;
            let (mean, std) = channel_stats(&xu);
            let mut min = f64::INFINITY;
            for n in 0..x.n() {
                let z: Vec<f64> = mean.row(n).iter().chain(std.row(n)).copied().collect();
                for a in p.fc1.apply_vec(&z) {
                    min = min.min(a.abs());
                }
            }
            Ok(min)
        }
        Block::PatSp(p) => {
            let logits = conv2d(x, &p.map)?;
            Ok(logits
                .data()
                .iter()
                .map(|&l| (l - 3.0).abs().min((l + 3.0).abs()))
                .fold(f64::INFINITY, f64::min))
        }
        Block::PatSf(_) => Ok(f64::INFINITY),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|v| v[0] * v[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in BlockKind::ALL {
            let sizes = ProbeSizes::default_for(kind);
            let block = random_block(kind, &sizes, &mut rng).unwrap();
            let x = normal_tensor(&mut rng, sizes.n, sizes.c, sizes.h, sizes.w, 1.0);
            let u = Tensor4::zeros(sizes.n, sizes.c, sizes.h, sizes.w);
            let s = sizes.validate(kind).unwrap();
            let (gx, gp) = block_vjp(&block, s, &x, &u).unwrap();
            assert!(gx.data().iter().all(|&v| v == 0.0));
            assert!(gp.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
            assert_eq!(gp.len(), block.params().len());
        }
    }

    #[test]
    fn saturated_spatial_gate_has_no_map_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sizes = ProbeSizes::default_for(BlockKind::PatSp);
        let block = Block::PatSp(PatSpParams {
            map: ConvParams::pointwise(Tensor4::zeros(1, 8, 1, 1), Some(vec![10.0])).unwrap(),
        });
        let x = normal_tensor(&mut rng, 2, 8, 4, 4, 1.0);
        let u = normal_tensor(&mut rng, 2, 8, 4, 4, 1.0);
        let (gx, gp) = block_vjp(&block, sizes.validate(BlockKind::PatSp).unwrap(), &x, &u).unwrap();
        assert!(gp.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
        assert_eq!(gx, u);
    }

    #[test]
    fn default_probes_pass() {
        for kind in BlockKind::ALL {
            let r = gradcheck_block(kind, 0, &ProbeSizes::default_for(kind)).unwrap();
            assert!(r.pass, "{kind}: {:?}", r.entries);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let opts = GradcheckOptions { inject_fault: true, ..GradcheckOptions::f32() };
        for kind in BlockKind::ALL {
            let r = gradcheck_block_with(kind, 0, &ProbeSizes::default_for(kind), &opts).unwrap();
            assert!(!r.pass, "{kind}");
        }
    }

    #[test]
    fn oversized_probe_is_rejected() {
        let mut sizes = ProbeSizes::default_for(BlockKind::PatCh);
        sizes.h = 9;
        assert!(gradcheck_block(BlockKind::PatCh, 0, &sizes).is_err());
        assert!("pat_xx".parse::<BlockKind>().is_err());
    }
}
