//! Row-major single-threaded matrix multiply.
//!
//! The `f32` path packs `A` into 6-row panels and `B` into 16-column panels and
//! runs an AVX2/FMA register-tile kernel when the CPU supports it. Every output
//! element is reduced over `k` in ascending order within each `KC` block, and
//! blocks are added in ascending order, so results are bitwise reproducible for
//! a given machine.

use super::Scalar;

const MR: usize = 6;
const NR: usize = 16;
const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 2048;

/// Below this many multiply-adds packing costs more than it saves.
const PACKED_MIN_WORK: usize = 8 * 1024;

/// `c (+)= a * b`. See [`Scalar::gemm`].
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    check_extents(m, n, k, a.len(), lda, b.len(), ldb, c.len(), ldc);
    T::gemm(m, n, k, a, lda, b, ldb, c, ldc, accumulate)
}

#[allow(clippy::too_many_arguments)]
fn check_extents(
    m: usize,
    n: usize,
    k: usize,
    a_len: usize,
    lda: usize,
    b_len: usize,
    ldb: usize,
    c_len: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(lda >= k && ldb >= n && ldc >= n, "gemm leading dimensions too small");
    if k > 0 {
        assert!(a_len >= (m - 1) * lda + k, "gemm: A too short");
        assert!(b_len >= (k - 1) * ldb + n, "gemm: B too short");
    }
    assert!(c_len >= (m - 1) * ldc + n, "gemm: C too short");
}

#[allow(clippy::too_many_arguments)]
pub(super) fn gemm_generic<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        if !accumulate {
            crow.fill(T::zero());
        }
        let arow = &a[i * lda..i * lda + k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn gemm_f32(
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
    #[cfg(target_arch = "x86_64")]
    {
        if m * n * k >= PACKED_MIN_WORK && has_avx2_fma() {
            gemm_packed(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
            return;
        }
    }
    gemm_generic(m, n, k, a, lda, b, ldb, c, ldc, accumulate)
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static DETECTED: OnceLock<bool> = OnceLock::new();
    *DETECTED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
fn gemm_packed(
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
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(0.0);
            }
        }
        return;
    }
    let mut bpack = vec![0.0f32; KC * NC.min(n.div_ceil(NR) * NR)];
    let mut apack = vec![0.0f32; MC * KC];
    let mut tile = [0.0f32; MR * NR];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            let overwrite = pc == 0 && !accumulate;
            pack_b(&b[pc * ldb + jc..], ldb, kc, nc, &mut bpack);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(&a[ic * lda + pc..], lda, mc, kc, &mut apack);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bpanel = &bpack[jr * kc..jr * kc + kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let apanel = &apack[ir * kc..ir * kc + kc * MR];
                        // SAFETY: AVX2 and FMA were detected at runtime; both
                        // panels hold exactly kc * MR / kc * NR packed values.
                        unsafe { kernel_6x16(kc, apanel.as_ptr(), bpanel.as_ptr(), &mut tile) };
                        for r in 0..mr {
                            let row = (ic + ir + r) * ldc + jc + jr;
                            let dst = &mut c[row..row + nr];
                            let src = &tile[r * NR..r * NR + nr];
                            if overwrite {
                                dst.copy_from_slice(src);
                            } else {
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Packs a `kc x nc` block of B into consecutive `kc x NR` column panels.
fn pack_b(b: &[f32], ldb: usize, kc: usize, nc: usize, out: &mut [f32]) {
    for (panel, jr) in (0..nc).step_by(NR).enumerate() {
        let nr = NR.min(nc - jr);
        let dst = &mut out[panel * kc * NR..(panel + 1) * kc * NR];
        for p in 0..kc {
            let src = &b[p * ldb + jr..p * ldb + jr + nr];
            let row = &mut dst[p * NR..(p + 1) * NR];
            row[..nr].copy_from_slice(src);
            row[nr..].fill(0.0);
        }
    }
}

/// Packs an `mc x kc` block of A into consecutive `MR x kc` row panels stored
/// column by column.
fn pack_a(a: &[f32], lda: usize, mc: usize, kc: usize, out: &mut [f32]) {
    for (panel, ir) in (0..mc).step_by(MR).enumerate() {
        let mr = MR.min(mc - ir);
        let dst = &mut out[panel * kc * MR..(panel + 1) * kc * MR];
        for p in 0..kc {
            for r in 0..MR {
                dst[p * MR + r] = if r < mr { a[(ir + r) * lda + p] } else { 0.0 };
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn kernel_6x16(kc: usize, a: *const f32, b: *const f32, tile: &mut [f32; MR * NR]) {
    use std::arch::x86_64::*;

    let mut acc = [[_mm256_setzero_ps(); 2]; MR];
    for p in 0..kc {
        let b0 = _mm256_loadu_ps(b.add(p * NR));
        let b1 = _mm256_loadu_ps(b.add(p * NR + 8));
        let ap = a.add(p * MR);
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm256_broadcast_ss(&*ap.add(r));
            row[0] = _mm256_fmadd_ps(av, b0, row[0]);
            row[1] = _mm256_fmadd_ps(av, b1, row[1]);
        }
    }
    let out = tile.as_mut_ptr();
    for (r, row) in acc.iter().enumerate() {
        _mm256_storeu_ps(out.add(r * NR), row[0]);
        _mm256_storeu_ps(out.add(r * NR + 8), row[1]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f32], b: &[f32]) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c
    }

    fn fill(len: usize, seed: u32) -> Vec<f32> {
        let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 17;
                state ^= state << 5;
                (state as f32 / u32::MAX as f32) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn packed_path_matches_naive_on_ragged_sizes() {
        for &(m, n, k) in &[(7, 33, 300), (96, 49, 512), (13, 17, 41), (100, 3, 600), (1, 1000, 64)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let mut c = vec![0.0f32; m * n];
            gemm(m, n, k, &a, k, &b, n, &mut c, n, false);
            let want = naive(m, n, k, &a, &b);
            for (got, want) in c.iter().zip(&want) {
                assert!((*got as f64 - want).abs() < 1e-4 * (k as f64).sqrt(), "{m}x{n}x{k}");
            }
        }
    }

    #[test]
    fn accumulate_adds_into_existing_output() {
        let (m, n, k) = (20, 40, 300);
        let a = fill(m * k, 3);
        let b = fill(k * n, 4);
        let mut c = vec![1.0f32; m * n];
        gemm(m, n, k, &a, k, &b, n, &mut c, n, true);
        let want = naive(m, n, k, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((*got as f64 - (want + 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn strided_operands() {
        // Multiply the top-left 3x4 block of a 5x6 matrix by a 4x2 block of a 4x7 one.
        let a = fill(30, 5);
        let b = fill(28, 6);
        let mut c = vec![0.0f32; 3 * 9];
        gemm(3, 2, 4, &a, 6, &b, 7, &mut c, 9, false);
        for i in 0..3 {
            for j in 0..2 {
                let want: f32 = (0..4).map(|p| a[i * 6 + p] * b[p * 7 + j]).sum();
                assert!((c[i * 9 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_inner_dimension_clears_output() {
        let mut c = vec![3.0f32; 4];
        gemm::<f32>(2, 2, 0, &[], 0, &[], 2, &mut c, 2, false);
        assert_eq!(c, vec![0.0; 4]);
    }
}
