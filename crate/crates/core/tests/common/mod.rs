#![allow(dead_code)]

use patnet::blocks::{Linear, PatChParams, PatSfParams, PatSpParams, RelPosBias};
use patnet::tensor::{ConvParams, Matrix, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng) as f32).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, normals(rng, n * c * h * w, 1.0)).unwrap()
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, bound: f32) -> Tensor4 {
    let data = (0..n * c * h * w).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor4::from_vec(n, c, h, w, data).unwrap()
}

pub fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, pad: usize, bias: bool) -> ConvParams {
    let w = tensor(rng, cout, cin, k, k);
    let b = bias.then(|| normals(rng, cout, 1.0));
    ConvParams::new(w, b, 1, pad, 1).unwrap()
}

pub fn linear(rng: &mut ChaCha8Rng, out: usize, inp: usize, scale: f32) -> Linear {
    let w = Matrix::from_vec(out, inp, normals(rng, out * inp, scale)).unwrap();
    Linear::new(w, normals(rng, out, scale)).unwrap()
}

pub fn pat_ch(rng: &mut ChaCha8Rng, c_p: usize, c_u: usize, hidden: usize) -> PatChParams {
    PatChParams {
        conv3: (c_p > 0).then(|| conv(rng, c_p, c_p, 3, 1, false)),
        fc1: linear(rng, hidden, 2 * c_u, 0.5),
        fc2: linear(rng, c_u, hidden, 0.5),
    }
}

pub fn pat_sp(rng: &mut ChaCha8Rng, c: usize) -> PatSpParams {
    PatSpParams { map: conv(rng, c, 1, 1, 0, true) }
}

pub fn pat_sf(rng: &mut ChaCha8Rng, c_p: usize, c_u: usize, heads: usize, h: usize, w: usize) -> PatSfParams {
    let mut rpe = RelPosBias::zeros(heads, h, w);
    rpe.table = normals(rng, rpe.table.len(), 0.5);
    PatSfParams {
        conv3: (c_p > 0).then(|| conv(rng, c_p, c_p, 3, 1, false)),
        q: linear(rng, c_u, c_u, 0.5),
        k: linear(rng, c_u, c_u, 0.5),
        v: linear(rng, c_u, c_u, 0.5),
        o: linear(rng, c_u, c_u, 0.5),
        heads,
        rpe,
    }
}

/// Channel slice `[from, to)` of every sample, flattened.
pub fn channels(x: &Tensor4, from: usize, to: usize) -> Vec<f32> {
    let plane = x.spatial();
    (0..x.n()).flat_map(|n| x.sample(n)[from * plane..to * plane].to_vec()).collect()
}
