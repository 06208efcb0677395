//! Shared numeric kernels.
//!
//! Every routine here is called from two places: the tape ops (training
//! forward pass) and the tape-free decode path. Keeping a single
//! implementation per routine is what makes batch-scan vs. incremental
//! decode agree to near machine precision — both sides execute the same
//! floating-point operations in the same order.

use num_complex::Complex64;

/// out = a @ b, a: [m,k], b: [k,n], out: [m,n]. Row-major, ikj loop order.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out = a @ b^T, a: [m,k], b: [n,k], out: [m,n]. Dot products of contiguous rows.
pub fn matmul_tb(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            out[i * n + j] = s;
        }
    }
}

/// out = a^T @ b, a: [m,k], b: [m,n], out: [k,n]. Used by matmul VJPs.
pub fn matmul_at_b(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place max-shifted softmax over one row.
pub fn softmax_row(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const RMSNORM_EPS: f64 = 1e-6;

/// y = x / sqrt(mean(x^2) + eps) * gain, one row.
pub fn rmsnorm_row(x: &[f64], gain: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), gain.len());
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    ms = ms / x.len() as f64 + RMSNORM_EPS;
    let inv = 1.0 / ms.sqrt();
    for c in 0..x.len() {
        out[c] = x[c] * inv * gain[c];
    }
}

/// One causal depthwise convolution tap.
///
/// `window` holds exactly `k_c` rows, oldest first, the last row being the
/// current position; rows that fall before the sequence start are `None`
/// (zero padding). Weights are [k_c, d] row-major, bias [d].
pub fn conv_tap(window: &[Option<&[f64]>], w: &[f64], b: &[f64], out: &mut [f64]) {
    let k_c = window.len();
    let d = b.len();
    debug_assert_eq!(w.len(), k_c * d);
    out.copy_from_slice(b);
    for (tap, row) in window.iter().enumerate() {
        if let Some(row) = row {
            let wrow = &w[tap * d..(tap + 1) * d];
            for c in 0..d {
                out[c] += wrow[c] * row[c];
            }
        }
    }
}

/// Apply a set of disjoint Givens rotations to a complex vector.
///
/// For pair (i,j) with angle t: out_i = cos t * h_i - sin t * h_j,
/// out_j = sin t * h_i + cos t * h_j. Indices not covered by a pair pass
/// through unchanged. Disjoint pairs make the application order irrelevant.
pub fn givens_apply(
    h: &[Complex64],
    theta: &[f64],
    pairs: &[(usize, usize)],
    out: &mut [Complex64],
) {
    debug_assert_eq!(theta.len(), pairs.len());
    out.copy_from_slice(h);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let (c, s) = (theta[k].cos(), theta[k].sin());
        let (hi, hj) = (h[i], h[j]);
        out[i] = Complex64::new(c * hi.re - s * hj.re, c * hi.im - s * hj.im);
        out[j] = Complex64::new(s * hi.re + c * hj.re, s * hi.im + c * hj.im);
    }
}

/// One Fan recurrence step: h = (1-p) * rot + p * (inj_re + i inj_im).
pub fn fan_mix(rot: &[Complex64], p: f64, inj_re: &[f64], inj_im: &[f64], out: &mut [Complex64]) {
    let omp = 1.0 - p;
    for c in 0..rot.len() {
        out[c] = Complex64::new(
            omp * rot[c].re + p * inj_re[c],
            omp * rot[c].im + p * inj_im[c],
        );
    }
}
