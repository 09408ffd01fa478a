//! Row-major dense kernels with hand-written backward passes.
//!
//! Linear weights are stored `(in, out)` so a row product is a sequence of axpys.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const NORM_EPS: f64 = 1e-6;

/// `x (rows, n_in) · w (n_in, n_out)`.
pub fn matmul(x: &[f64], w: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut y = vec![0.0; rows * n_out];
    for (xr, yr) in x.chunks_exact(n_in).zip(y.chunks_exact_mut(n_out)) {
        for (i, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                math::axpy(a, &w[i * n_out..(i + 1) * n_out], yr);
            }
        }
    }
    y
}

/// Accumulates `∂w += xᵀ·gy` and returns `gy · wᵀ`.
pub fn matmul_backward(x: &[f64], w: &[f64], gy: &[f64], n_in: usize, n_out: usize, gw: &mut [f64]) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut gx = vec![0.0; rows * n_in];
    for ((xr, gyr), gxr) in x.chunks_exact(n_in).zip(gy.chunks_exact(n_out)).zip(gx.chunks_exact_mut(n_in)) {
        for i in 0..n_in {
            let wi = &w[i * n_out..(i + 1) * n_out];
            gxr[i] = math::dot(wi, gyr);
            if xr[i] != 0.0 {
                math::axpy(xr[i], gyr, &mut gw[i * n_out..(i + 1) * n_out]);
            }
        }
    }
    gx
}

/// RMS normalization of each row, scaled by `weight`. Returns the output and
/// the per-row reciprocal RMS.
pub fn rmsnorm(x: &[f64], weight: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = weight.len();
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let r = 1.0 / math::sqrt(math::dot(xr, xr) / n as f64 + NORM_EPS);
        for i in 0..n {
            yr[i] = xr[i] * r * weight[i];
        }
        inv.push(r);
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]; accumulates into `gw`.
pub fn rmsnorm_backward(x: &[f64], weight: &[f64], inv: &[f64], gy: &[f64], gw: &mut [f64]) -> Vec<f64> {
    let n = weight.len();
    let mut gx = vec![0.0; x.len()];
    for (((xr, gyr), gxr), &r) in x.chunks_exact(n).zip(gy.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).zip(inv) {
        let mut s = 0.0;
        for i in 0..n {
            gw[i] += gyr[i] * xr[i] * r;
            s += weight[i] * gyr[i] * xr[i];
        }
        let c = s * r * r * r / n as f64;
        for i in 0..n {
            gxr[i] = weight[i] * gyr[i] * r - xr[i] * c;
        }
    }
    gx
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) {
        for i in 0..x.len() {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn matmul_and_rmsnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (x, w, gy, nw, gy2) = (r(6), r(6), r(4), r(3), r(6));
        let mut gw = vec![0.0; 6];
        let gx = matmul_backward(&x, &w, &gy, 3, 2, &mut gw);
        fd_check(|x| math::dot(&matmul(x, &w, 3, 2), &gy), &x, &gx);
        fd_check(|w| math::dot(&matmul(&x, w, 3, 2), &gy), &w, &gw);

        let (_, inv) = rmsnorm(&x, &nw);
        let mut gnw = vec![0.0; 3];
        let gx = rmsnorm_backward(&x, &nw, &inv, &gy2, &mut gnw);
        fd_check(|x| math::dot(&rmsnorm(x, &nw).0, &gy2), &x, &gx);
        fd_check(|w| math::dot(&rmsnorm(&x, w).0, &gy2), &nw, &gnw);
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let num = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }
}
