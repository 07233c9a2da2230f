//! Binary morphology with physical-radius Euclidean balls.
//!
//! Dilation and erosion are computed from an exact separable squared
//! Euclidean distance transform, so a voxel is within the ball of radius `r`
//! of a set voxel exactly when `dist^2 <= r^2`. Voxels outside the grid count
//! as background.

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Close,
}

/// Absolute slack on `r^2` so that offsets lying exactly on the sphere are
/// treated as inside regardless of rounding.
fn ball_limit(radius_mm: f64) -> f64 {
    let r2 = radius_mm * radius_mm;
    r2 + 1e-9 * r2.max(1.0)
}

pub fn morph(mask: &BinaryMask, op: MorphOp, radius_mm: f64) -> Result<BinaryMask> {
    if !(radius_mm >= 0.0 && radius_mm.is_finite()) {
        return Err(Error::invalid(format!(
            "morphology radius must be >= 0, got {radius_mm}"
        )));
    }
    if radius_mm == 0.0 {
        return Ok(mask.clone());
    }
    Ok(match op {
        MorphOp::Dilate => dilate(mask, radius_mm),
        MorphOp::Erode => erode(mask, radius_mm),
        MorphOp::Close => erode(&dilate(mask, radius_mm), radius_mm),
    })
}

fn dilate(mask: &BinaryMask, r: f64) -> BinaryMask {
    let grid = mask.grid();
    let Some(bbox) = mask.bounding_box() else {
        return mask.clone();
    };
    let by = grid.spacing().map(|s| (r / s).ceil() as usize);
    let region = bbox.expanded(by, grid.dims());
    let sub = mask.crop(&region);
    let d2 = squared_distance_map(region.dims(), grid.spacing(), sub.bits(), false);
    let limit = ball_limit(r);
    let bits = d2.iter().map(|&d| d <= limit).collect();
    let sub = BinaryMask::new(sub.grid().clone(), bits).expect("same size");
    BinaryMask::embed(grid, &sub, &region)
}

fn erode(mask: &BinaryMask, r: f64) -> BinaryMask {
    let grid = mask.grid();
    let Some(region) = mask.bounding_box() else {
        return mask.clone();
    };
    // Everything outside the bounding box is background, as is everything
    // outside the grid, so the region border can be treated uniformly.
    let sub = mask.crop(&region);
    let background: Vec<bool> = sub.bits().iter().map(|&b| !b).collect();
    let d2 = squared_distance_map(region.dims(), grid.spacing(), &background, true);
    let limit = ball_limit(r);
    let bits = sub
        .bits()
        .iter()
        .zip(&d2)
        .map(|(&b, &d)| b && d > limit)
        .collect();
    let sub = BinaryMask::new(sub.grid().clone(), bits).expect("same size");
    BinaryMask::embed(grid, &sub, &region)
}

/// Squared physical distance from every voxel to the nearest voxel with
/// `target[idx] == true`. With `outside_is_target`, the layer of voxels just
/// outside the box counts as target too. Voxels with no reachable target get
/// `f64::INFINITY`.
pub fn squared_distance_map(
    dims: [usize; 3],
    spacing: [f64; 3],
    target: &[bool],
    outside_is_target: bool,
) -> Vec<f64> {
    let mut d: Vec<f64> = target
        .iter()
        .map(|&t| if t { 0.0 } else { f64::INFINITY })
        .collect();
    let [nx, ny, nz] = dims;
    let mut scratch = Scratch::default();
    let mut line = Vec::new();
    let mut out = Vec::new();

    for row in d.chunks_mut(nx) {
        line.clear();
        line.extend_from_slice(row);
        out.resize(nx, 0.0);
        scratch.transform(&line, spacing[0], outside_is_target, &mut out);
        row.copy_from_slice(&out);
    }
    for k in 0..nz {
        for i in 0..nx {
            line.clear();
            line.extend((0..ny).map(|j| d[i + nx * (j + ny * k)]));
            out.resize(ny, 0.0);
            scratch.transform(&line, spacing[1], outside_is_target, &mut out);
            for (j, &v) in out.iter().enumerate() {
                d[i + nx * (j + ny * k)] = v;
            }
        }
    }
    let plane = nx * ny;
    for p in 0..plane {
        line.clear();
        line.extend((0..nz).map(|k| d[p + plane * k]));
        out.resize(nz, 0.0);
        scratch.transform(&line, spacing[2], outside_is_target, &mut out);
        for (k, &v) in out.iter().enumerate() {
            d[p + plane * k] = v;
        }
    }
    d
}

/// Lower envelope of parabolas for the 1D squared distance transform
/// (Felzenszwalb & Huttenlocher), with sample positions scaled by spacing.
#[derive(Default)]
struct Scratch {
    site_pos: Vec<f64>,
    site_val: Vec<f64>,
    env_pos: Vec<f64>,
    env_val: Vec<f64>,
    bounds: Vec<f64>,
}

impl Scratch {
    fn transform(&mut self, f: &[f64], s: f64, boundary: bool, out: &mut [f64]) {
        let n = f.len();
        self.site_pos.clear();
        self.site_val.clear();
        if boundary {
            self.site_pos.push(-s);
            self.site_val.push(0.0);
        }
        for (q, &v) in f.iter().enumerate() {
            if v.is_finite() {
                self.site_pos.push(q as f64 * s);
                self.site_val.push(v);
            }
        }
        if boundary {
            self.site_pos.push(n as f64 * s);
            self.site_val.push(0.0);
        }
        if self.site_pos.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }

        self.env_pos.clear();
        self.env_val.clear();
        self.bounds.clear();
        self.env_pos.push(self.site_pos[0]);
        self.env_val.push(self.site_val[0]);
        self.bounds.push(f64::NEG_INFINITY);
        self.bounds.push(f64::INFINITY);
        for q in 1..self.site_pos.len() {
            let (p, v) = (self.site_pos[q], self.site_val[q]);
            let mut k = self.env_pos.len() - 1;
            let mut x;
            loop {
                let (pk, vk) = (self.env_pos[k], self.env_val[k]);
                x = ((v + p * p) - (vk + pk * pk)) / (2.0 * (p - pk));
                // bounds[0] is -inf, so this always stops at k = 0.
                if x <= self.bounds[k] {
                    k -= 1;
                } else {
                    break;
                }
            }
            self.env_pos.truncate(k + 1);
            self.env_val.truncate(k + 1);
            self.bounds.truncate(k + 1);
            self.bounds.push(x);
            self.env_pos.push(p);
            self.env_val.push(v);
            self.bounds.push(f64::INFINITY);
        }

        let mut k = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let x = i as f64 * s;
            while self.bounds[k + 1] < x {
                k += 1;
            }
            let dx = x - self.env_pos[k];
            *o = dx * dx + self.env_val[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;

    fn grid(dims: [usize; 3], s: [f64; 3]) -> VoxelGrid {
        VoxelGrid::new(dims, s, [0.0; 3]).unwrap()
    }

    /// Per-voxel max/min over the ball, with out-of-grid offsets treated as
    /// background.
    fn brute(mask: &BinaryMask, op: MorphOp, r: f64) -> BinaryMask {
        let g = mask.grid().clone();
        let [nx, ny, nz] = g.dims();
        let s = g.spacing();
        let reach = s.map(|s| (r / s).floor() as i64);
        let limit = ball_limit(r);
        let mut offsets = Vec::new();
        for dz in -reach[2]..=reach[2] {
            for dy in -reach[1]..=reach[1] {
                for dx in -reach[0]..=reach[0] {
                    let d2 = (dx as f64 * s[0]).powi(2)
                        + (dy as f64 * s[1]).powi(2)
                        + (dz as f64 * s[2]).powi(2);
                    if d2 <= limit {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        let at = |i: i64, j: i64, k: i64| -> bool {
            i >= 0
                && j >= 0
                && k >= 0
                && (i as usize) < nx
                && (j as usize) < ny
                && (k as usize) < nz
                && mask.get(i as usize, j as usize, k as usize)
        };
        BinaryMask::from_fn(g, |[i, j, k]| {
            let (i, j, k) = (i as i64, j as i64, k as i64);
            match op {
                MorphOp::Dilate => offsets.iter().any(|d| at(i + d[0], j + d[1], k + d[2])),
                MorphOp::Erode => offsets.iter().all(|d| at(i + d[0], j + d[1], k + d[2])),
                MorphOp::Close => unreachable!(),
            }
        })
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = BinaryMask::from_fn(grid([5, 5, 5], [1.0; 3]), |[i, j, k]| (i * j + k) % 3 == 1);
        for op in [MorphOp::Erode, MorphOp::Dilate, MorphOp::Close] {
            assert_eq!(morph(&m, op, 0.0).unwrap(), m);
        }
    }

    #[test]
    fn negative_radius_rejected() {
        let m = BinaryMask::empty(grid([2, 2, 2], [1.0; 3]));
        assert!(morph(&m, MorphOp::Dilate, -1.0).is_err());
    }

    #[test]
    fn unit_dilation_of_point_is_face_cross() {
        let mut m = BinaryMask::empty(grid([5, 5, 5], [1.0; 3]));
        m.set(2, 2, 2, true);
        let d = morph(&m, MorphOp::Dilate, 1.0).unwrap();
        assert_eq!(d.count(), 7);
        for (i, j, k) in [(1, 2, 2), (3, 2, 2), (2, 1, 2), (2, 3, 2), (2, 2, 1), (2, 2, 3)] {
            assert!(d.get(i, j, k));
        }
    }

    #[test]
    fn full_mask_erosion_matches_brute_force() {
        let g = grid([12, 10, 9], [1.0, 1.0, 1.5]);
        let m = BinaryMask::full(g);
        for r in [1.0, 2.0, 2.9, 4.0] {
            let fast = morph(&m, MorphOp::Erode, r).unwrap();
            assert_eq!(fast, brute(&m, MorphOp::Erode, r), "r = {r}");
        }
        // Interior shrinks by the ball radius; 2 mm is under two 1.5 mm slices.
        let e = morph(&m, MorphOp::Erode, 2.0).unwrap();
        let bb = e.bounding_box().unwrap();
        assert_eq!(bb.lo, [2, 2, 1]);
        assert_eq!(bb.hi, [10, 8, 8]);
    }

    #[test]
    fn random_masks_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let s = [0.7, 0.9, 1.6];
            let g = grid([9, 8, 7], s);
            let density = 0.2 + 0.6 * (case as f64 / 20.0);
            let m = BinaryMask::from_fn(g, |_| false);
            let bits: Vec<bool> = (0..m.grid().len()).map(|_| rng.random_bool(density)).collect();
            let m = BinaryMask::new(m.grid().clone(), bits).unwrap();
            let r = rng.random_range(0.5..3.5);
            for op in [MorphOp::Erode, MorphOp::Dilate] {
                assert_eq!(morph(&m, op, r).unwrap(), brute(&m, op, r), "case {case} {op:?}");
            }
        }
    }

    #[test]
    fn close_fills_small_hole() {
        let g = grid([9, 9, 9], [1.0; 3]);
        let mut m = BinaryMask::from_fn(g, |[i, j, k]| {
            (2..7).contains(&i) && (2..7).contains(&j) && (2..7).contains(&k)
        });
        m.set(4, 4, 4, false);
        let c = morph(&m, MorphOp::Close, 1.5).unwrap();
        assert!(c.get(4, 4, 4));
        assert!(m.is_subset_of(&c).unwrap());
    }

    #[test]
    fn distance_map_with_boundary_sites() {
        let target = vec![false; 5];
        let d = squared_distance_map([5, 1, 1], [2.0, 1.0, 1.0], &target, true);
        // y and z boundaries are one unit away.
        assert_eq!(d, vec![1.0; 5]);
        let d = squared_distance_map([5, 1, 1], [2.0, 1.0, 1.0], &target, false);
        assert!(d.iter().all(|v| v.is_infinite()));
    }
}
