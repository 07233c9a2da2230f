//! Small analytic solids used to rasterize phantoms and atlas shapes.

use crate::volume::{Region, VoxelGrid};

/// Axis-aligned ellipsoid in physical millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi: [f64; 3],
}

impl Ellipsoid {
    pub fn new(center: [f64; 3], semi: [f64; 3]) -> Self {
        Self { center, semi }
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            acc += d * d;
        }
        acc <= 1.0
    }

    /// Same center, every semi-axis lengthened by `by` mm.
    pub fn grown(&self, by: f64) -> Self {
        Self {
            center: self.center,
            semi: self.semi.map(|s| s + by),
        }
    }

    /// Uniform scaling about `pivot`.
    pub fn scaled_about(&self, pivot: [f64; 3], s: f64) -> Self {
        Self {
            center: std::array::from_fn(|a| pivot[a] + (self.center[a] - pivot[a]) * s),
            semi: self.semi.map(|v| v * s),
        }
    }

    pub fn translated(&self, by: [f64; 3]) -> Self {
        Self {
            center: std::array::from_fn(|a| self.center[a] + by[a]),
            semi: self.semi,
        }
    }

    pub fn lo(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] - self.semi[a])
    }

    pub fn hi(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] + self.semi[a])
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi.iter().product::<f64>()
    }
}

/// Voxels of `grid` whose centers may fall inside the physical box
/// `[lo, hi]`, or `None` when the box misses the grid.
pub fn voxel_span(grid: &VoxelGrid, lo: [f64; 3], hi: [f64; 3]) -> Option<Region> {
    let dims = grid.dims();
    let a = grid.to_voxel(lo);
    let b = grid.to_voxel(hi);
    let mut r = Region {
        lo: [0; 3],
        hi: [0; 3],
    };
    for ax in 0..3 {
        let l = a[ax].ceil().max(0.0);
        let h = (b[ax].floor() + 1.0).min(dims[ax] as f64);
        if h <= l {
            return None;
        }
        r.lo[ax] = l as usize;
        r.hi[ax] = h as usize;
    }
    Some(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_and_bounds() {
        let e = Ellipsoid::new([0.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert!(e.contains([2.0, 0.0, 0.0]));
        assert!(!e.contains([2.01, 0.0, 0.0]));
        assert!(e.grown(1.0).contains([2.9, 0.0, 0.0]));
        let s = e.scaled_about([10.0, 0.0, 0.0], 2.0);
        assert_eq!(s.center, [-10.0, 0.0, 0.0]);
        assert_eq!(s.semi, [4.0, 2.0, 2.0]);
    }

    #[test]
    fn span_clips_to_grid() {
        let g = VoxelGrid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let r = voxel_span(&g, [-5.0, 2.5, 3.0], [3.2, 4.0, 100.0]).unwrap();
        assert_eq!(r.lo, [0, 3, 3]);
        assert_eq!(r.hi, [4, 5, 10]);
        assert!(voxel_span(&g, [20.0, 0.0, 0.0], [30.0, 1.0, 1.0]).is_none());
    }
}
