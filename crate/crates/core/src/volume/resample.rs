//! Separable resampling. Each axis is resampled independently through a
//! list of (input index, weight) taps per output sample, so trilinear
//! interpolation and area averaging share one implementation.

use rayon::prelude::*;

use super::{CtVolume, FloatVolume, VoxelGrid, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

/// Taps of one axis: `taps[m]` lists the input samples feeding output `m`.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub n_in: usize,
    pub taps: Vec<Vec<(usize, f32)>>,
}

impl AxisTaps {
    fn is_identity(&self) -> bool {
        self.taps.len() == self.n_in
            && self
                .taps
                .iter()
                .enumerate()
                .all(|(m, t)| t.len() == 1 && t[0].0 == m && t[0].1 == 1.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Linear,
    Area,
}

/// Output sample count and origin for resampling one axis so that the
/// outer voxel boxes keep the same physical extent.
fn axis_geometry(n: usize, s: f64, origin: f64, t: f64) -> Result<(usize, f64)> {
    let n_out = (n as f64 * s / t).round();
    if n_out < 1.0 {
        return Err(Error::invalid(format!(
            "target spacing {t} mm leaves no samples over a {} mm extent",
            n as f64 * s
        )));
    }
    Ok((n_out as usize, origin - s / 2.0 + t / 2.0))
}

/// Taps for resampling `n_in` samples at ratio `r = target / source` into
/// `n_out` samples, box-aligned at the lower edge.
pub fn resample_axis_taps(n_in: usize, n_out: usize, r: f64, area: bool) -> AxisTaps {
    let kernel = if area && r > 1.0 {
        Kernel::Area
    } else {
        Kernel::Linear
    };
    let last = (n_in - 1) as f64;
    let taps = (0..n_out)
        .map(|m| match kernel {
            Kernel::Linear => {
                let c = (m as f64 * r + (r - 1.0) / 2.0).clamp(0.0, last);
                let i0 = c.floor() as usize;
                let w = c - i0 as f64;
                if w < 1e-9 || i0 + 1 >= n_in {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, (1.0 - w) as f32), (i0 + 1, w as f32)]
                }
            }
            Kernel::Area => {
                let lo = m as f64 * r - 0.5;
                let hi = (m + 1) as f64 * r - 0.5;
                let first = (lo + 0.5).floor().max(0.0) as usize;
                let end = ((hi + 0.5).ceil().max(0.0) as usize).min(n_in);
                let mut taps: Vec<(usize, f64)> = (first..end)
                    .filter_map(|i| {
                        let a = (i as f64 - 0.5).max(lo);
                        let b = (i as f64 + 0.5).min(hi);
                        (b > a).then_some((i, b - a))
                    })
                    .collect();
                if taps.is_empty() {
                    taps.push((((lo + hi) / 2.0).round().clamp(0.0, last) as usize, 1.0));
                }
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.into_iter()
                    .map(|(i, w)| (i, (w / total) as f32))
                    .collect()
            }
        })
        .collect();
    AxisTaps { n_in, taps }
}

/// Resample `input` (dims `dims`) along `axis`.
fn apply_axis<T>(input: &[T], dims: [usize; 3], axis: usize, taps: &AxisTaps) -> (Vec<f32>, [usize; 3])
where
    T: Copy + Into<f32> + Sync,
{
    let mut out_dims = dims;
    out_dims[axis] = taps.taps.len();
    let [nx, ny, _] = dims;
    let [ox, oy, _] = out_dims;
    let mut out = vec![0.0f32; out_dims.iter().product()];
    match axis {
        0 => out.par_chunks_mut(ox).enumerate().for_each(|(row, dst)| {
            let src = &input[row * nx..(row + 1) * nx];
            for (m, t) in taps.taps.iter().enumerate() {
                dst[m] = t.iter().map(|&(i, w)| w * src[i].into()).sum();
            }
        }),
        1 => out.par_chunks_mut(ox * oy).enumerate().for_each(|(k, plane)| {
            for (m, t) in taps.taps.iter().enumerate() {
                let dst = &mut plane[m * ox..(m + 1) * ox];
                for &(j, w) in t {
                    let src = &input[nx * (j + ny * k)..nx * (j + ny * k) + nx];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s.into();
                    }
                }
            }
        }),
        _ => out.par_chunks_mut(ox * oy).enumerate().for_each(|(m, plane)| {
            for &(k, w) in &taps.taps[m] {
                let src = &input[nx * ny * k..nx * ny * (k + 1)];
                for (d, &s) in plane.iter_mut().zip(src) {
                    *d += w * s.into();
                }
            }
        }),
    }
    (out, out_dims)
}

fn resample_values<T>(
    values: &[T],
    grid: &VoxelGrid,
    target: [f64; 3],
    area: bool,
) -> Result<(Vec<f32>, VoxelGrid)>
where
    T: Copy + Into<f32> + Sync,
{
    if target.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let dims = grid.dims();
    let mut out_dims = [0; 3];
    let mut out_origin = [0.0; 3];
    let mut taps = Vec::with_capacity(3);
    for a in 0..3 {
        let (n, o) = axis_geometry(dims[a], grid.spacing()[a], grid.origin()[a], target[a])?;
        out_dims[a] = n;
        out_origin[a] = o;
        taps.push(resample_axis_taps(dims[a], n, target[a] / grid.spacing()[a], area));
    }
    let out_grid = VoxelGrid::new(out_dims, target, out_origin)?;

    let mut cur_dims = dims;
    let mut cur: Option<Vec<f32>> = None;
    for (axis, t) in taps.iter().enumerate() {
        if t.is_identity() {
            continue;
        }
        let (next, nd) = match &cur {
            Some(buf) => apply_axis(buf, cur_dims, axis, t),
            None => apply_axis(values, cur_dims, axis, t),
        };
        cur = Some(next);
        cur_dims = nd;
    }
    let out = cur.unwrap_or_else(|| values.iter().map(|&v| v.into()).collect());
    Ok((out, out_grid))
}

/// Trilinear resampling to a new spacing over the same physical extent.
/// Interpolated values are rounded and clamped to the valid HU range.
pub fn resample(vol: &CtVolume, target_spacing_mm: [f64; 3]) -> Result<CtVolume> {
    let (vals, grid) = resample_values(vol.values(), vol.grid(), target_spacing_mm, false)?;
    let values = vals
        .into_iter()
        .map(|v| v.round().clamp(f32::from(HU_MIN), f32::from(HU_MAX)) as i16)
        .collect();
    CtVolume::new(grid, values)
}

/// Trilinear resampling of a real-valued field.
pub fn resample_field(field: &FloatVolume, target_spacing_mm: [f64; 3]) -> Result<FloatVolume> {
    let (values, grid) = resample_values(&field.values, &field.grid, target_spacing_mm, false)?;
    FloatVolume::new(grid, values)
}

/// Area-weighted averaging onto a coarser grid. Axes whose target spacing is
/// finer than the source fall back to linear interpolation.
pub fn downsample_area(vol: &CtVolume, target_spacing_mm: [f64; 3]) -> Result<FloatVolume> {
    let (values, grid) = resample_values(vol.values(), vol.grid(), target_spacing_mm, true)?;
    FloatVolume::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], s: [f64; 3]) -> VoxelGrid {
        VoxelGrid::new(dims, s, [0.0; 3]).unwrap()
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = CtVolume::filled(grid([7, 5, 9], [0.7, 0.7, 2.5]), 42).unwrap();
        for target in [[2.0, 2.0, 2.0], [0.5, 0.9, 1.0], [3.3, 1.1, 7.0]] {
            let r = resample(&v, target).unwrap();
            assert!(r.values().iter().all(|&x| x == 42), "target {target:?}");
        }
    }

    #[test]
    fn identity_spacing_is_exact() {
        let g = VoxelGrid::new([6, 5, 4], [1.5, 1.5, 3.0], [-10.0, 4.0, 2.0]).unwrap();
        let v = CtVolume::from_fn(g, |[i, j, k]| i as i16 * 37 - j as i16 * 101 + k as i16 * 13)
            .unwrap();
        let r = resample(&v, [1.5, 1.5, 3.0]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn ramp_resampled_to_coarser_grid() {
        // v(x) = 2x on a 1 mm grid; the 2 mm grid samples the ramp at
        // x = 0.5, 2.5, 4.5, ... (box-aligned centers).
        let g = grid([10, 1, 1], [1.0; 3]);
        let v = CtVolume::from_fn(g, |[i, _, _]| 2 * i as i16).unwrap();
        let r = resample(&v, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.grid().dims(), [5, 1, 1]);
        assert_eq!(r.grid().origin()[0], 0.5);
        let expected: Vec<i16> = (0..5).map(|m| (2.0 * (0.5 + 2.0 * m as f64)) as i16).collect();
        assert_eq!(r.values(), expected.as_slice());
    }

    #[test]
    fn extent_preserved_within_one_voxel() {
        let g = grid([37, 23, 11], [0.73, 0.73, 2.5]);
        let v = CtVolume::filled(g.clone(), 0).unwrap();
        for t in [[2.0, 2.0, 2.0], [0.4, 1.7, 3.1]] {
            let r = resample(&v, t).unwrap();
            for a in 0..3 {
                assert!((r.grid().extent_mm()[a] - g.extent_mm()[a]).abs() <= t[a]);
            }
        }
    }

    #[test]
    fn degenerate_extent_is_rejected() {
        let v = CtVolume::filled(grid([2, 2, 2], [1.0; 3]), 0).unwrap();
        assert!(resample(&v, [10.0, 1.0, 1.0]).is_err());
        assert!(resample(&v, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn clamps_to_hu_range() {
        let g = grid([2, 1, 1], [1.0; 3]);
        let v = CtVolume::new(g, vec![3071, 3071]).unwrap();
        let r = resample(&v, [0.3, 1.0, 1.0]).unwrap();
        assert!(r.values().iter().all(|&x| x == 3071));
    }

    #[test]
    fn area_average_of_pairs() {
        let g = grid([4, 1, 1], [1.0; 3]);
        let v = CtVolume::new(g, vec![0, 10, 20, 40]).unwrap();
        let f = downsample_area(&v, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(f.values, vec![5.0, 30.0]);
    }

    #[test]
    fn area_weights_sum_to_one() {
        for (n, r) in [(10usize, 1.3), (17, 2.7), (5, 1.01)] {
            let n_out = ((n as f64) / r).round() as usize;
            let taps = resample_axis_taps(n, n_out, r, true);
            for t in &taps.taps {
                let s: f32 = t.iter().map(|x| x.1).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
