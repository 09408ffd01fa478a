//! Deterministic synthetic scans standing in for restricted datasets.
//!
//! A scan is an ellipsoidal "brain" on a zero background. Inside it, each
//! block of an 8-block parcellation carries its own slow oscillation on top
//! of a smooth intensity baseline and a shared global signal. A fixed
//! spherical blob receives an amplitude-modulated signal proportional to
//! `label_effect * y`, where `y` is the label (or regression target).

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{preprocess_volume, TargetKind, TargetRecord, Volume4D};
use crate::array::Array;
use crate::error::{config_err, Result};
use crate::math::{self, Square};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthTarget {
    Binary(bool),
    Regression(f64),
}

impl SynthTarget {
    fn value(self) -> f64 {
        match self {
            SynthTarget::Binary(b) => b as u8 as f64,
            SynthTarget::Regression(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub t_total: usize,
    /// Signal-to-noise ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub label_effect: f64,
    pub target: SynthTarget,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.t_total == 0 {
            return Err(config_err!("t_total must be at least 1"));
        }
        if self.dims.iter().any(|&n| n < 4) {
            return Err(config_err!("every spatial extent must be at least 4, got {:?}", self.dims));
        }
        if !(self.snr > 0.0) {
            return Err(config_err!("snr must be positive, got {}", self.snr));
        }
        if !self.label_effect.is_finite() || self.label_effect < 0.0 {
            return Err(config_err!("label_effect must be finite and non-negative"));
        }
        if let SynthTarget::Regression(v) = self.target {
            if !v.is_finite() {
                return Err(config_err!("regression target must be finite"));
            }
        }
        Ok(())
    }
}

/// Block parcellation of a grid: labels `1..=splits.product()`, one per block,
/// blocks enumerated with the last axis fastest.
pub fn block_atlas(dims: [usize; 3], splits: [usize; 3]) -> Vec<u32> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let b = [z * splits[0] / dims[0], y * splits[1] / dims[1], x * splits[2] / dims[2]];
                out.push(((b[0] * splits[1] + b[1]) * splits[2] + b[2]) as u32 + 1);
            }
        }
    }
    out
}

struct Oscillator {
    freq: f64,
    phase: f64,
    amp: f64,
}

impl Oscillator {
    fn random(rng: &mut ChaCha8Rng, freq: (f64, f64), amp: (f64, f64)) -> Self {
        Self {
            freq: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: rng.random_range(amp.0..amp.1),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * libm::sin(2.0 * PI * self.freq * t + self.phase)
    }
}

const ROI_SPLITS: [usize; 3] = [2, 2, 2];
const NOISE_SCALE: f64 = 4.0;
const BLOB_GAIN: f64 = 8.0;
const BLOB_PERIOD: f64 = 12.0;

/// Generates one preprocessed scan and its target. Bit-identical for equal specs.
pub fn synthesize_scan(spec: &SynthSpec, scan_id: impl Into<String>) -> Result<(Volume4D, TargetRecord)> {
    spec.validate()?;
    let scan_id = scan_id.into();
    let [d, h, w] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let rois: Vec<[Oscillator; 3]> = (0..ROI_SPLITS.iter().product::<usize>())
        .map(|_| core::array::from_fn(|_| Oscillator::random(&mut rng, (0.02, 0.12), (1.0, 3.0))))
        .collect();
    let global = Oscillator::random(&mut rng, (0.01, 0.05), (1.0, 2.0));
    let blob_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let sigma = if spec.snr.is_infinite() { 0.0 } else { NOISE_SCALE / spec.snr };

    let atlas = block_atlas(spec.dims, ROI_SPLITS);
    let centre = [d as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w as f64 / 2.0 - 0.5];
    let radii = [0.42 * d as f64, 0.42 * h as f64, 0.42 * w as f64];
    let blob_centre = [0.35 * d as f64, 0.6 * h as f64, 0.5 * w as f64];
    let blob_r2 = {
        let r = (d.min(h).min(w) as f64 / 8.0).max(1.5);
        r * r
    };

    // Static per-voxel layout: (offset, roi index, baseline, in blob)
    let mut voxels = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let e: f64 = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).sq()).sum();
                if e > 1.0 {
                    continue;
                }
                let u = [(p[0] - centre[0]) / radii[0], (p[1] - centre[1]) / radii[1]];
                let baseline = 60.0 + 20.0 * u[0] + 10.0 * u[1];
                let b2: f64 = (0..3).map(|a| (p[a] - blob_centre[a]).sq()).sum();
                let off = (z * h + y) * w + x;
                voxels.push((off, atlas[off] as usize - 1, baseline, b2 <= blob_r2));
            }
        }
    }

    let y_value = spec.target.value();
    let frame_len = d * h * w;
    let mut raw = Array::<f32>::zeros(&[spec.t_total, d, h, w]);
    let data = raw.data_mut();
    for t in 0..spec.t_total {
        let tf = t as f64;
        let roi_signal: Vec<f64> = rois.iter().map(|osc| osc.iter().map(|o| o.at(tf)).sum()).collect();
        let g = global.at(tf);
        let blob = spec.label_effect
            * y_value
            * BLOB_GAIN
            * (1.0 + 0.5 * libm::sin(2.0 * PI * tf / BLOB_PERIOD + blob_phase));
        let frame = &mut data[t * frame_len..(t + 1) * frame_len];
        for &(off, roi, baseline, in_blob) in &voxels {
            let mut v = baseline + roi_signal[roi] + g;
            if in_blob {
                v += blob;
            }
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v += sigma * n;
            }
            frame[off] = v as f32;
        }
    }

    let (pre, _) = preprocess_volume(&raw, spec.dims)?;
    let volume = Volume4D::new(pre, [1.0; 3], scan_id.clone())?;
    let kind = match spec.target {
        SynthTarget::Binary(_) => TargetKind::BinaryClassification,
        SynthTarget::Regression(_) => TargetKind::Regression,
    };
    let record = TargetRecord { scan_id, kind, raw_value: y_value, normalized_value: y_value };
    Ok((volume, record))
}

/// Order-sensitive checksum of a voxel array (sum of index-weighted values in f64).
pub fn voxel_checksum(data: &[f32]) -> f64 {
    data.iter().enumerate().map(|(i, &v)| v as f64 * (1.0 + (i % 97) as f64 / 97.0)).sum::<f64>()
        + math::sqrt(data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, label: bool, effect: f64, snr: f64) -> SynthSpec {
        SynthSpec { dims: [16, 16, 16], t_total: 8, snr, label_effect: effect, target: SynthTarget::Binary(label), seed }
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec { snr: f64::INFINITY, seed: 7, ..small(7, true, 1.0, 1.0) };
        let a = synthesize_scan(&spec, "a").unwrap();
        let b = synthesize_scan(&spec, "a").unwrap();
        assert_eq!(a, b);
        let noisy = small(7, true, 1.0, 2.0);
        assert_eq!(synthesize_scan(&noisy, "n").unwrap(), synthesize_scan(&noisy, "n").unwrap());
    }

    #[test]
    fn pinned_checksum() {
        let (vol, rec) = synthesize_scan(&small(3, true, 1.0, 4.0), "g").unwrap();
        assert_eq!(rec.raw_value, 1.0);
        let sum = voxel_checksum(vol.data().data());
        // golden value from the first verified run
        assert!((sum - GOLDEN_CHECKSUM).abs() < 1e-6, "checksum {sum:.9}");
    }

    const GOLDEN_CHECKSUM: f64 = -26764.712502524;

    #[test]
    fn label_changes_blob_only_when_effect_positive() {
        let a = synthesize_scan(&small(5, true, 0.0, f64::INFINITY), "a").unwrap().0;
        let b = synthesize_scan(&small(5, false, 0.0, f64::INFINITY), "b").unwrap().0;
        assert_eq!(a.data(), b.data());
        let c = synthesize_scan(&small(5, true, 1.0, f64::INFINITY), "c").unwrap().0;
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn preprocessed_invariants() {
        let (vol, _) = synthesize_scan(&small(1, false, 1.0, 3.0), "x").unwrap();
        assert_eq!(vol.dims(), [16, 16, 16]);
        let lo = vol.data().data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vol.data().data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(synthesize_scan(&SynthSpec { t_total: 0, ..small(1, true, 1.0, 1.0) }, "x").is_err());
        assert!(synthesize_scan(&SynthSpec { snr: 0.0, ..small(1, true, 1.0, 1.0) }, "x").is_err());
        assert!(synthesize_scan(&SynthSpec { label_effect: -1.0, ..small(1, true, 1.0, 1.0) }, "x").is_err());
    }

    #[test]
    fn atlas_blocks() {
        let a = block_atlas([4, 4, 4], [2, 2, 2]);
        assert_eq!(a[0], 1);
        assert_eq!(a[3], 2);
        assert_eq!(a[63], 8);
        for l in 1..=8 {
            assert_eq!(a.iter().filter(|&&v| v == l).count(), 8);
        }
    }
}
