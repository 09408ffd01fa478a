//! Scan ingestion types, preprocessing, synthetic scans and dataset splits.

mod preprocess;
mod split;
mod synth;

use alloc::string::String;
use alloc::vec::Vec;

pub use preprocess::{crop_or_pad, minmax_normalize, preprocess_volume, CropReport};
pub use split::{make_split, SplitRecord, SplitSpec, DEFAULT_RATIOS};
pub use synth::{block_atlas, synthesize_scan, voxel_checksum, SynthSpec, SynthTarget};

use crate::array::Array;
use crate::error::{shape_err, Error, Result};

/// Spatial shape every scan is brought to before tokenization.
pub const TARGET_SHAPE: [usize; 3] = [96, 96, 96];

/// A preprocessed fMRI scan, indexed `(t, d, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    data: Array<f32>,
    /// Voxel size in mm along (d, h, w). Metadata only.
    pub spacing: [f32; 3],
    pub scan_id: String,
}

impl Volume4D {
    /// Wraps already-preprocessed data, checking the value range and axis count.
    pub fn new(data: Array<f32>, spacing: [f32; 3], scan_id: impl Into<String>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(shape_err!("volume must have 4 axes (t, d, h, w), got {:?}", data.shape()));
        }
        if data.shape()[0] == 0 {
            return Err(shape_err!("volume has no frames"));
        }
        if let Some(v) = data.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(alloc::format!("value {v} outside [-1, 1]")));
        }
        Ok(Self { data, spacing, scan_id: scan_id.into() })
    }

    pub fn t_total(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial extents `(d, h, w)`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame_len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data.data()[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &Array<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array<f32> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub scan_id: String,
    pub kind: TargetKind,
    /// 0/1 for classification, the raw measurement for regression.
    pub raw_value: f64,
    /// Equal to `raw_value` for classification; z-scored for regression.
    pub normalized_value: f64,
}

/// Mean and standard deviation of a regression target, fit on the training split only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetNormalizer {
    pub mean: f64,
    pub std: f64,
}

impl TargetNormalizer {
    /// Population statistics (ddof = 0) over the training values.
    pub fn fit(train_values: &[f64]) -> Result<Self> {
        if train_values.is_empty() {
            return Err(Error::Data("cannot fit target normalization on an empty split".into()));
        }
        let n = train_values.len() as f64;
        let mean = train_values.iter().sum::<f64>() / n;
        let var = train_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = crate::math::sqrt(var);
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Data("training targets have zero variance".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Fills `normalized_value` for every record: identity for classification,
/// z-scores with statistics from `train_ids` for regression.
pub fn normalize_targets(records: &mut [TargetRecord], train_ids: &[String]) -> Result<Option<TargetNormalizer>> {
    let Some(kind) = records.first().map(|r| r.kind) else {
        return Ok(None);
    };
    if records.iter().any(|r| r.kind != kind) {
        return Err(Error::Data("mixed target kinds".into()));
    }
    match kind {
        TargetKind::BinaryClassification => {
            for r in records.iter_mut() {
                r.normalized_value = r.raw_value;
            }
            Ok(None)
        }
        TargetKind::Regression => {
            let train: Vec<f64> = records
                .iter()
                .filter(|r| train_ids.iter().any(|id| *id == r.scan_id))
                .map(|r| r.raw_value)
                .collect();
            let norm = TargetNormalizer::fit(&train)?;
            for r in records.iter_mut() {
                r.normalized_value = norm.apply(r.raw_value);
            }
            Ok(Some(norm))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalizer_uses_training_split_only() {
        let mut recs: Vec<TargetRecord> = [("a", 1.0), ("b", 3.0), ("c", 100.0)]
            .iter()
            .map(|(id, v)| TargetRecord {
                scan_id: (*id).into(),
                kind: TargetKind::Regression,
                raw_value: *v,
                normalized_value: f64::NAN,
            })
            .collect();
        let norm = normalize_targets(&mut recs, &["a".into(), "b".into()]).unwrap().unwrap();
        assert_eq!(norm.mean, 2.0);
        assert_eq!(norm.std, 1.0);
        assert_eq!(recs[0].normalized_value, -1.0);
        assert_eq!(recs[2].normalized_value, 98.0);
    }

    #[test]
    fn zero_variance_rejected() {
        assert!(TargetNormalizer::fit(&[2.0, 2.0]).is_err());
    }

    #[test]
    fn volume_rejects_out_of_range() {
        let a = Array::from_vec(&[1, 1, 1, 2], vec![0.0, 1.5]).unwrap();
        assert!(matches!(Volume4D::new(a, [1.0; 3], "x"), Err(Error::Data(_))));
        let a = Array::from_vec(&[1, 2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(Volume4D::new(a, [1.0; 3], "x"), Err(Error::Shape(_))));
    }
}
