use crate::array::Array;
use crate::error::{shape_err, Error, Result};

/// What the crop/pad step did to each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropReport {
    /// Half-open bounding box `[lo, hi)` of nonzero voxels per axis, over all frames.
    /// `None` for an all-zero scan.
    pub bbox: Option<[(usize, usize); 3]>,
    /// Axes whose bounding box exceeded the target and had to be center-cropped.
    pub cropped: [bool; 3],
}

fn check_raw(raw: &Array<f32>) -> Result<()> {
    if raw.ndim() != 4 {
        return Err(shape_err!("expected 4 axes (t, d, h, w), got shape {:?}", raw.shape()));
    }
    if raw.shape()[0] == 0 {
        return Err(shape_err!("scan has no frames"));
    }
    if raw.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("scan contains non-finite values".into()));
    }
    Ok(())
}

fn nonzero_bbox(raw: &Array<f32>) -> Option<[(usize, usize); 3]> {
    let s = raw.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for frame in raw.data().chunks_exact(d * h * w) {
        for z in 0..d {
            for y in 0..h {
                let row = &frame[(z * h + y) * w..(z * h + y + 1) * w];
                let Some(first) = row.iter().position(|&v| v != 0.0) else {
                    continue;
                };
                let last = row.iter().rposition(|&v| v != 0.0).unwrap();
                any = true;
                lo[0] = lo[0].min(z);
                hi[0] = hi[0].max(z + 1);
                lo[1] = lo[1].min(y);
                hi[1] = hi[1].max(y + 1);
                lo[2] = lo[2].min(first);
                hi[2] = hi[2].max(last + 1);
            }
        }
    }
    any.then(|| [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])])
}

/// Moves the nonzero bounding box (union over frames) to the center of a
/// `target` grid, zero-padding around it, or center-cropping axes where it
/// does not fit.
pub fn crop_or_pad(raw: &Array<f32>, target: [usize; 3]) -> Result<(Array<f32>, CropReport)> {
    check_raw(raw)?;
    if target.iter().any(|&n| n == 0) {
        return Err(shape_err!("target shape {:?} has an empty axis", target));
    }
    let s = raw.shape();
    let t_total = s[0];
    let src_dims = [s[1], s[2], s[3]];
    let mut out = Array::zeros(&[t_total, target[0], target[1], target[2]]);
    let bbox = nonzero_bbox(raw);
    let mut cropped = [false; 3];
    let Some(b) = bbox else {
        return Ok((out, CropReport { bbox, cropped }));
    };

    // (src_start, dst_start, len) per axis
    let mut plan = [(0usize, 0usize, 0usize); 3];
    for a in 0..3 {
        let (lo, hi) = b[a];
        let extent = hi - lo;
        plan[a] = if extent <= target[a] {
            (lo, (target[a] - extent) / 2, extent)
        } else {
            cropped[a] = true;
            (lo + (extent - target[a]) / 2, 0, target[a])
        };
    }
    if cropped.iter().any(|&c| c) {
        log::warn!(
            "nonzero bounding box {:?} exceeds target {:?}; center-cropping",
            b.map(|(lo, hi)| hi - lo),
            target
        );
    }

    let [(sd, dd, ld), (sh, dh, lh), (sw, dw, lw)] = plan;
    let src_frame = src_dims.iter().product::<usize>();
    let dst_frame = target.iter().product::<usize>();
    let src = raw.data();
    let dst = out.data_mut();
    for t in 0..t_total {
        for z in 0..ld {
            for y in 0..lh {
                let so = t * src_frame + ((sd + z) * src_dims[1] + sh + y) * src_dims[2] + sw;
                let do_ = t * dst_frame + ((dd + z) * target[1] + dh + y) * target[2] + dw;
                dst[do_..do_ + lw].copy_from_slice(&src[so..so + lw]);
            }
        }
    }
    Ok((out, CropReport { bbox, cropped }))
}

/// Global (all frames) min-max rescaling to `[-1, 1]`. A constant scan maps
/// to zeros; data already spanning exactly `[-1, 1]` is left untouched.
pub fn minmax_normalize(data: &mut Array<f32>) -> Result<()> {
    if data.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite values".into()));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in data.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if data.is_empty() {
        return Ok(());
    }
    if lo == hi {
        data.data_mut().iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    if lo == -1.0 && hi == 1.0 {
        return Ok(());
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    for v in data.data_mut() {
        let mapped = 2.0 * ((*v as f64 - lo) / range) - 1.0;
        *v = (mapped as f32).clamp(-1.0, 1.0);
    }
    Ok(())
}

/// Crop/pad to `target` followed by global min-max normalization.
pub fn preprocess_volume(raw: &Array<f32>, target: [usize; 3]) -> Result<(Array<f32>, CropReport)> {
    let (mut out, report) = crop_or_pad(raw, target)?;
    minmax_normalize(&mut out)?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn empty_scan(t: usize, dims: [usize; 3]) -> Array<f32> {
        Array::zeros(&[t, dims[0], dims[1], dims[2]])
    }

    fn arr(shape: &[usize], data: Vec<f32>) -> Array<f32> {
        Array::from_vec(shape, data).unwrap()
    }

    #[test]
    fn linear_minmax_endpoints() {
        let raw = arr(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect());
        let (out, _) = preprocess_volume(&raw, [2, 2, 2]).unwrap();
        for (v, o) in (0..8).zip(out.data()) {
            let expect = 2.0 * v as f64 / 7.0 - 1.0;
            assert!((*o as f64 - expect).abs() < 1e-6, "{o} vs {expect}");
        }
        assert_eq!(out.data()[0], -1.0);
        assert_eq!(out.data()[7], 1.0);
    }

    #[test]
    fn constant_scan_maps_to_zero() {
        let raw = arr(&[2, 4, 4, 4], vec![5.0; 128]);
        let (out, _) = preprocess_volume(&raw, [4, 4, 4]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let (out, report) = preprocess_volume(&empty_scan(1, [3, 3, 3]), [4, 4, 4]).unwrap();
        assert!(report.bbox.is_none());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_centered_in_target() {
        let n = 64;
        let mut raw = Array::<f32>::zeros(&[1, n, n, n]);
        for z in 10..50 {
            for y in 10..50 {
                for x in 10..50 {
                    raw.set(&[0, z, y, x], 1.0 + (z + y + x) as f32);
                }
            }
        }
        let (out, report) = crop_or_pad(&raw, [96, 96, 96]).unwrap();
        // brute-force bounding box of the output
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for z in 0..96 {
            for y in 0..96 {
                for x in 0..96 {
                    if out.get(&[0, z, y, x]) != 0.0 {
                        for (a, i) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(i);
                            hi[a] = hi[a].max(i + 1);
                        }
                    }
                }
            }
        }
        assert_eq!(lo, [28; 3]);
        assert_eq!(hi, [68; 3]);
        assert_eq!(report.bbox, Some([(10, 50); 3]));
        assert_eq!(out.get(&[0, 28, 28, 28]), raw.get(&[0, 10, 10, 10]));
    }

    #[test]
    fn oversized_box_is_center_cropped() {
        let raw = arr(&[1, 1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, report) = crop_or_pad(&raw, [1, 1, 4]).unwrap();
        assert_eq!(report.cropped, [false, false, true]);
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn errors() {
        let raw = arr(&[2, 2, 2], vec![0.0; 8]);
        assert!(matches!(preprocess_volume(&raw, [2, 2, 2]), Err(Error::Shape(_))));
        let raw = arr(&[1, 1, 1, 2], vec![0.0, f32::NAN]);
        assert!(matches!(preprocess_volume(&raw, [1, 1, 2]), Err(Error::Data(_))));
    }

    fn raw_scan() -> impl Strategy<Value = Array<f32>> {
        (1usize..3, 1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(t, d, h, w)| {
            proptest::collection::vec(prop_oneof![Just(0.0f32), -50.0f32..50.0], t * d * h * w)
                .prop_map(move |v| Array::from_vec(&[t, d, h, w], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn idempotent(raw in raw_scan()) {
            let (once, _) = preprocess_volume(&raw, [6, 6, 6]).unwrap();
            let (twice, _) = preprocess_volume(&once, [6, 6, 6]).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn range_endpoints_exact(raw in raw_scan()) {
            let (out, _) = preprocess_volume(&raw, [6, 6, 6]).unwrap();
            let lo = out.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = out.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if lo != hi {
                prop_assert_eq!((lo, hi), (-1.0, 1.0));
            } else {
                prop_assert_eq!(lo, 0.0);
            }
        }

        #[test]
        fn crop_pad_preserves_nonzero_multiset(raw in raw_scan()) {
            let (out, _) = crop_or_pad(&raw, [6, 6, 6]).unwrap();
            let mut a: Vec<f32> = raw.data().iter().cloned().filter(|&v| v != 0.0).collect();
            let mut b: Vec<f32> = out.data().iter().cloned().filter(|&v| v != 0.0).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
