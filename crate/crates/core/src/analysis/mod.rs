//! Reconstruction fidelity (PSNR, SSIM, functional-connectivity drift) and
//! attribution maps.

mod ig;
mod ssim;

pub use ig::{average_maps, confident_correct, integrated_gradients, model_integrated_gradients, AttributionMap, CONFIDENCE_THRESHOLD, DEFAULT_IG_STEPS};
pub use ssim::{gaussian_window, ssim, SsimParams};

use alloc::vec;
use alloc::vec::Vec;

use crate::autoencoder::Autoencoder2D;
use crate::data::Volume4D;
use crate::error::{shape_err, Error, Result};
use crate::math::{self, Square};
use crate::tokenizer::{average_axes, decode_stack, slice_and_encode, Axis};

/// Inputs live in [−1, 1].
pub const DATA_RANGE: f64 = 2.0;
/// PSNR reported for identical inputs in tables and plots.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("psnr inputs differ in length ({} vs {})", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).sq()).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(data_range * data_range / mse))
}

/// PSNR with the infinite sentinel replaced by [`PSNR_CAP_DB`].
pub fn psnr_capped(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// Mean time series of every ROI label > 0 that has voxels; labels ascending.
pub fn roi_series(vol: &Volume4D, labels: &[u32]) -> Result<Vec<Vec<f64>>> {
    if labels.len() != vol.frame_len() {
        return Err(shape_err!("atlas has {} voxels, frames have {}", labels.len(), vol.frame_len()));
    }
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0usize; max + 1];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    let rois: Vec<usize> = (1..=max).filter(|&l| counts[l] > 0).collect();
    let mut slot = vec![usize::MAX; max + 1];
    rois.iter().enumerate().for_each(|(i, &l)| slot[l] = i);
    let mut series = vec![vec![0.0; vol.t_total()]; rois.len()];
    for t in 0..vol.t_total() {
        for (&l, &v) in labels.iter().zip(vol.frame(t)) {
            if l > 0 {
                series[slot[l as usize]][t] += v as f64;
            }
        }
        for (s, &l) in series.iter_mut().zip(&rois) {
            s[t] /= counts[l] as f64;
        }
    }
    Ok(series)
}

/// Pearson correlation matrix of the series; constant series correlate as 0 (diagonal included).
pub fn fc_matrix(series: &[Vec<f64>]) -> Vec<f64> {
    let r = series.len();
    let centered: Vec<(Vec<f64>, f64)> = series
        .iter()
        .map(|s| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let c: Vec<f64> = s.iter().map(|v| v - m).collect();
            let n = math::sqrt(math::dot(&c, &c));
            (c, n)
        })
        .collect();
    let mut fc = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            let (a, na) = &centered[i];
            let (b, nb) = &centered[j];
            if *na > 0.0 && *nb > 0.0 && i == j {
                fc[i * r + j] = 1.0;
            } else if *na > 0.0 && *nb > 0.0 {
                fc[i * r + j] = (math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
            }
        }
    }
    fc
}

/// Frobenius norm of the difference between ROI connectivity matrices.
pub fn fc_frobenius(orig: &Volume4D, recon: &Volume4D, labels: &[u32]) -> Result<f64> {
    if orig.dims() != recon.dims() || orig.t_total() != recon.t_total() {
        return Err(shape_err!("original and reconstruction differ in shape"));
    }
    if orig.t_total() < 3 {
        return Err(Error::Data("connectivity needs at least 3 frames".into()));
    }
    let (a, b) = (roi_series(orig, labels)?, roi_series(recon, labels)?);
    if a.len() < 2 {
        return Err(Error::Data("connectivity needs at least 2 non-empty ROIs".into()));
    }
    let (fa, fb) = (fc_matrix(&a), fc_matrix(&b));
    Ok(math::sqrt(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum()))
}

/// Reconstruction of a frame by each slicing axis, with a (possibly different) autoencoder per axis.
pub fn reconstruct_per_axis(frame: &[f32], dims: [usize; 3], aes: [&dyn Autoencoder2D; 3]) -> Result<[Vec<f32>; 3]> {
    let mut out: [Vec<f32>; 3] = Default::default();
    for axis in Axis::ALL {
        let ae = aes[axis.index()];
        let stack = slice_and_encode(frame, dims, axis, ae)?;
        out[axis.index()] = decode_stack(axis, &stack.data, dims, ae)?;
    }
    Ok(out)
}

/// Mean of the three per-axis slice-decode reconstructions.
pub fn reconstruct_three_axis_average<A: Autoencoder2D>(frame: &[f32], dims: [usize; 3], ae: &A) -> Result<Vec<f32>> {
    Ok(average_axes(&reconstruct_per_axis(frame, dims, [ae, ae, ae])?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReport {
    /// dB; `+∞` when the reconstruction is exact.
    pub psnr: f64,
    /// Mean over frames of the 3D SSIM.
    pub ssim: f64,
    pub fc_frobenius: f64,
}

/// Reconstructs every frame of `vol` and scores it against the original.
pub fn recon_report<A: Autoencoder2D>(vol: &Volume4D, ae: &A, labels: &[u32], params: &SsimParams) -> Result<(Volume4D, ReconReport)> {
    let dims = vol.dims();
    let mut data = Vec::with_capacity(vol.data().len());
    let mut ssim_sum = 0.0;
    for t in 0..vol.t_total() {
        let r = reconstruct_three_axis_average(vol.frame(t), dims, ae)?;
        ssim_sum += ssim(vol.frame(t), &r, &dims, params)?;
        data.extend(r.into_iter().map(|v| v.clamp(-1.0, 1.0)));
    }
    let recon = Volume4D::new(crate::Array::from_vec(vol.data().shape(), data)?, vol.spacing, vol.scan_id.clone())?;
    let report = ReconReport {
        psnr: psnr(vol.data().data(), recon.data().data(), DATA_RANGE)?,
        ssim: ssim_sum / vol.t_total() as f64,
        fc_frobenius: fc_frobenius(vol, &recon, labels)?,
    };
    Ok((recon, report))
}
