//! NIfTI-1 volumes. Axes map as `(x, y, z, t)` → `(t, d, h, w)` with `d = x`.

use std::path::Path;

use ndarray::{Array4, ArrayD, Axis as NdAxis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use tablet_core::Array;

use crate::{IoError, IoResult};

/// Raw `(t, d, h, w)` data and voxel spacing in mm. 3D files become one frame.
pub fn load_nifti(path: &Path) -> IoResult<(Array<f32>, [f32; 3])> {
    if !path.exists() {
        return Err(IoError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| IoError::format(path, format!("not a readable NIfTI file: {e}")))?;
    let pixdim = obj.header().pixdim;
    let spacing = [pixdim[1], pixdim[2], pixdim[3]];
    let arr: ArrayD<f32> = obj.into_volume().into_ndarray::<f32>().map_err(|e| IoError::format(path, e.to_string()))?;
    let arr = match arr.ndim() {
        3 => arr.insert_axis(NdAxis(3)),
        4 => arr,
        n => return Err(IoError::format(path, format!("unsupported dimensionality {n}; expected 3D or 3D+time"))),
    };
    let arr = arr.into_dimensionality::<ndarray::Ix4>().map_err(|e| IoError::format(path, e.to_string()))?;
    let (x, y, z, t) = arr.dim();
    // (x, y, z, t) → (t, x, y, z), materialized in standard order
    let permuted = arr.permuted_axes([3, 0, 1, 2]);
    let data: Vec<f32> = permuted.iter().copied().collect();
    Ok((Array::from_vec(&[t, x, y, z], data)?, spacing))
}

/// Writes `(t, d, h, w)` data; single-frame data is written as a 3D volume.
pub fn write_nifti(path: &Path, data: &Array<f32>, spacing: [f32; 3]) -> IoResult<()> {
    let s = data.shape();
    if s.len() != 4 {
        return Err(IoError::format(path, format!("expected (t, d, h, w), got {s:?}")));
    }
    let arr = Array4::from_shape_vec((s[0], s[1], s[2], s[3]), data.data().to_vec()).map_err(|e| IoError::format(path, e.to_string()))?;
    let xyzt = arr.permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned();
    let header = NiftiHeader { pixdim: [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0], ..NiftiHeader::default() };
    let opts = WriterOptions::new(path).reference_header(&header);
    let res = if s[0] == 1 {
        opts.write_nifti(&xyzt.index_axis(NdAxis(3), 0).as_standard_layout().into_owned())
    } else {
        opts.write_nifti(&xyzt)
    };
    res.map_err(|e| IoError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize) -> Array<f32> {
        let n = t * 3 * 4 * 5;
        Array::from_vec(&[t, 3, 4, 5], (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_4d_and_3d() {
        let dir = tempfile::tempdir().unwrap();
        for t in [1, 3] {
            let p = dir.path().join(format!("v{t}.nii"));
            let a = sample(t);
            write_nifti(&p, &a, [2.0, 2.0, 3.0]).unwrap();
            let (b, sp) = load_nifti(&p).unwrap();
            assert_eq!(b, a);
            assert_eq!(sp, [2.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn corrupted_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, b"definitely not a nifti header").unwrap();
        assert!(matches!(load_nifti(&p), Err(IoError::Format { .. })));
        assert!(matches!(load_nifti(&dir.path().join("none.nii")), Err(IoError::Io { .. })));
    }
}
