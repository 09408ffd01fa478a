//! Gaussian-window SSIM over 1–3 dimensional arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::math::{self, Square};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd window extent per axis.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: super::DATA_RANGE }
    }
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| math::exp(-((i as f64 - c).sq()) / (2.0 * sigma * sigma))).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering along every axis.
fn filter(x: &[f64], shape: &[usize], taps: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut cur = x.to_vec();
    let mut sh = shape.to_vec();
    for ax in 0..sh.len() {
        let outer: usize = sh[..ax].iter().product();
        let inner: usize = sh[ax + 1..].iter().product();
        let n_out = sh[ax] + 1 - taps.len();
        let mut next = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            for p in 0..n_out {
                let dst = &mut next[(o * n_out + p) * inner..(o * n_out + p + 1) * inner];
                for (t, &w) in taps.iter().enumerate() {
                    let src = &cur[(o * sh[ax] + p + t) * inner..(o * sh[ax] + p + t + 1) * inner];
                    math::axpy(w, src, dst);
                }
            }
        }
        sh[ax] = n_out;
        cur = next;
    }
    (cur, sh)
}

/// Mean SSIM over all valid window positions.
pub fn ssim(a: &[f32], b: &[f32], shape: &[usize], p: &SsimParams) -> Result<f64> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n || shape.is_empty() || shape.len() > 3 {
        return Err(shape_err!("ssim inputs must match a 1-3D shape {shape:?}"));
    }
    if p.window == 0 || p.window % 2 == 0 || shape.iter().any(|&s| s < p.window) {
        return Err(config_err!("ssim window {} does not fit shape {shape:?}", p.window));
    }
    let taps = gaussian_window(p.window, p.sigma);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (ma, _) = filter(&a, shape, &taps);
    let (mb, _) = filter(&b, shape, &taps);
    let (maa, _) = filter(&prod(&a, &a), shape, &taps);
    let (mbb, _) = filter(&prod(&b, &b), shape, &taps);
    let (mab, _) = filter(&prod(&a, &b), shape, &taps);
    let c1 = (p.k1 * p.data_range).sq();
    let c2 = (p.k2 * p.data_range).sq();
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = maa[i] - mx * mx;
        let vy = mbb[i] - my * my;
        let cxy = mab[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / ma.len() as f64)
}
