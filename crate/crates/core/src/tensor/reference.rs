//! Direct-definition reference kernels evaluated in `f64`.
//!
//! These share no code with the fast kernels (no packing, no im2col, no
//! GEMM) and exist so the fast paths can be checked against them.

use super::{BnParams, ConvParams, Matrix, Tensor4};

/// Seven nested loops over `(n, co, oy, ox, ci, ky, kx)`.
pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Vec<f64> {
    let k = p.kernel();
    let (h, w) = (x.h() as isize, x.w() as isize);
    let oh = (x.h() + 2 * p.padding - k) / p.stride + 1;
    let ow = (x.w() + 2 * p.padding - k) / p.stride + 1;
    let cout = p.out_ch();
    let cin_g = p.weight.c();
    let cout_g = cout / p.groups;
    let mut out = Vec::with_capacity(x.n() * cout * oh * ow);
    for n in 0..x.n() {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b[co] as f64);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let xv = x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                                acc += p.weight.at(co, ci, ky, kx) as f64 * xv as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn batch_norm(x: &Tensor4, p: &BnParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for n in 0..x.n() {
        for c in 0..x.c() {
            let denom = (p.running_var[c] as f64 + p.eps as f64).sqrt();
            for y in 0..x.h() {
                for xx in 0..x.w() {
                    let v = x.at(n, c, y, xx) as f64;
                    out.push(
                        p.gamma[c] as f64 * (v - p.running_mean[c] as f64) / denom
                            + p.beta[c] as f64,
                    );
                }
            }
        }
    }
    out
}

pub fn softmax_rows(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.data().len());
    for r in 0..m.rows() {
        let row: Vec<f64> = m.row(r).iter().map(|&v| v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            for p in 0..a.cols() {
                out[i * b.cols() + j] += a.at(i, p) as f64 * b.at(p, j) as f64;
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor4) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..x.n() {
        for c in 0..x.c() {
            let mut s = 0.0;
            for y in 0..x.h() {
                for xx in 0..x.w() {
                    s += x.at(n, c, y, xx) as f64;
                }
            }
            out.push(s / x.spatial() as f64);
        }
    }
    out
}

/// Two-pass population mean and `sqrt(var + eps)`, flattened over `(n, c)`.
pub fn channel_stats(x: &Tensor4, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let count = x.spatial() as f64;
    for n in 0..x.n() {
        for c in 0..x.c() {
            let vals: Vec<f64> = (0..x.h())
                .flat_map(|y| (0..x.w()).map(move |xx| (y, xx)))
                .map(|(y, xx)| x.at(n, c, y, xx) as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            means.push(mean);
            stds.push((var + eps).sqrt());
        }
    }
    (means, stds)
}

pub fn max_abs_diff(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch against reference");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}
