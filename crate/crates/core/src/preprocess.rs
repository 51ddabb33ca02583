//! Scan preprocessing: isotropic resampling and HU windowing.

use crate::error::{Error, Result};
use crate::volume::{Payload, Volume};

/// Canonical isotropic voxel size in mm.
pub const CANONICAL_SPACING_MM: f64 = 0.4;
pub const HU_MIN: f32 = 0.0;
pub const HU_MAX: f32 = 5000.0;

/// Output extent along one axis; `None` when it rounds to zero voxels.
fn resampled_len(n: usize, spacing: f64, target: f64) -> Option<usize> {
    let extent = n as f64 * spacing / target;
    let m = (extent + 1e-9).round() as usize;
    (m >= 1).then_some(m)
}

/// Continuous source index sampled by output voxel `i`. Grids share their outer
/// edges, so voxel centres of the new grid sit at `(i + 0.5) * target`.
fn source_coord(i: usize, spacing: f64, target: f64) -> f64 {
    (i as f64 + 0.5) * target / spacing - 0.5
}

/// Resamples to an isotropic grid: trilinear for scalars, nearest neighbour for
/// labels. Volumes already on the target grid are returned unchanged.
pub fn resample_isotropic(v: &Volume, target: f64) -> Result<Volume> {
    let sp = v.spacing();
    if sp.iter().all(|&s| (s - target).abs() <= 1e-9 * target) {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let mut new_dims = [0usize; 3];
    for a in 0..3 {
        new_dims[a] = resampled_len(dims[a], sp[a], target).ok_or_else(|| {
            Error::InvalidVolume(format!(
                "axis {a} has extent {} mm, which resamples to zero voxels at {target} mm",
                dims[a] as f64 * sp[a]
            ))
        })?;
    }
    let mut origin = v.origin();
    for a in 0..3 {
        origin[a] += 0.5 * target - 0.5 * sp[a];
    }
    let coords: [Vec<f64>; 3] =
        std::array::from_fn(|a| (0..new_dims[a]).map(|i| source_coord(i, sp[a], target)).collect());
    let n_new = new_dims.iter().product::<usize>();
    let src = v.grid();

    let payload = match v.payload() {
        Payload::Scalar(data) => {
            // Per-axis (lower index, upper index, weight of upper).
            let taps: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
                coords[a]
                    .iter()
                    .map(|&c| {
                        let c = c.clamp(0.0, (dims[a] - 1) as f64);
                        let lo = c.floor() as usize;
                        let hi = (lo + 1).min(dims[a] - 1);
                        (lo, hi, c - lo as f64)
                    })
                    .collect()
            });
            let mut out = Vec::with_capacity(n_new);
            for &(z0, z1, wz) in &taps[2] {
                for &(y0, y1, wy) in &taps[1] {
                    for &(x0, x1, wx) in &taps[0] {
                        let at = |x, y, z| data[src.index(x, y, z)] as f64;
                        let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                        let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                        let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                        let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                        let c0 = c00 * (1.0 - wy) + c10 * wy;
                        let c1 = c01 * (1.0 - wy) + c11 * wy;
                        out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
                    }
                }
            }
            Payload::Scalar(out)
        }
        Payload::Labels(data) => {
            let nearest: [Vec<usize>; 3] = std::array::from_fn(|a| {
                coords[a].iter().map(|&c| (c.round().max(0.0) as usize).min(dims[a] - 1)).collect()
            });
            let mut out = Vec::with_capacity(n_new);
            for &z in &nearest[2] {
                for &y in &nearest[1] {
                    for &x in &nearest[0] {
                        out.push(data[src.index(x, y, z)]);
                    }
                }
            }
            Payload::Labels(out)
        }
        other => {
            return Err(Error::Unsupported(format!("resampling of {} payloads", other.kind())));
        }
    };
    Ok(Volume::new(new_dims, [target; 3], origin, payload)?.with_normalized(v.is_normalized()))
}

/// Resamples a HU scan to 0.4 mm isotropic, clips to [0, 5000] and scales to
/// [0, 1]. Intensity mapping is skipped on scans already marked normalized,
/// which makes the operation idempotent.
pub fn preprocess_scan(v: &Volume) -> Result<Volume> {
    v.as_scalar()?;
    let resampled = resample_isotropic(v, CANONICAL_SPACING_MM)?;
    if resampled.is_normalized() {
        return Ok(resampled);
    }
    let data = resampled
        .as_scalar()?
        .iter()
        .map(|&hu| (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
        .collect();
    Ok(resampled.with_payload(Payload::Scalar(data))?.with_normalized(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_5000_maps_to_one_and_negative_to_zero() {
        for (hu, expect) in [(5000.0f32, 1.0f32), (-1000.0, 0.0), (7000.0, 1.0)] {
            let v = Volume::scalar([3, 3, 3], [0.4; 3], vec![hu; 27]).unwrap();
            let p = preprocess_scan(&v).unwrap();
            assert!(p.as_scalar().unwrap().iter().all(|&x| x == expect));
        }
    }

    #[test]
    fn half_spacing_halves_dims() {
        let v = Volume::scalar([10, 10, 10], [0.2; 3], vec![100.0; 1000]).unwrap();
        let p = preprocess_scan(&v).unwrap();
        assert_eq!(p.dims(), [5, 5, 5]);
        assert_eq!(p.spacing(), [0.4; 3]);
    }

    #[test]
    fn labels_resample_by_nearest() {
        let v = Volume::labels([4, 1, 1], [0.2, 0.4, 0.4], vec![1, 1, 7, 7]).unwrap();
        let r = resample_isotropic(&v, 0.4).unwrap();
        assert_eq!(r.dims(), [2, 1, 1]);
        let l = r.as_labels().unwrap();
        assert!(l.iter().all(|&x| x == 1 || x == 7));
        assert_eq!(l[1], 7);
    }

    #[test]
    fn tiny_extent_is_rejected() {
        let v = Volume::scalar([1, 1, 1], [0.1, 0.4, 0.4], vec![1.0]).unwrap();
        assert!(preprocess_scan(&v).is_err());
    }

    #[test]
    fn non_scalar_input_is_rejected() {
        let v = Volume::labels([1, 1, 1], [0.4; 3], vec![1]).unwrap();
        assert!(preprocess_scan(&v).is_err());
    }
}
