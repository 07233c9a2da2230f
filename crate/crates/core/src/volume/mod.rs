//! Grid-aware CT volumes and binary masks.
//!
//! Voxels are stored x-fastest, then y, then z. Voxel `(i, j, k)` has its
//! center at `origin + (i, j, k) * spacing`, so a grid of `n` voxels along an
//! axis covers the physical interval `[origin - s/2, origin + (n - 1/2) s]`.

mod components;
mod morphology;
mod resample;

pub use components::{connected_components, largest_component, Component, Labeling};
pub use morphology::{morph, squared_distance_map, MorphOp};
pub use resample::{downsample_area, resample, resample_axis_taps, resample_field, AxisTaps};

use crate::error::{Error, Result};

/// Lowest representable Hounsfield value.
pub const HU_MIN: i16 = -1024;
/// Highest representable Hounsfield value.
pub const HU_MAX: i16 = 3071;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "grid spacing must be positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or_else(|| Error::invalid(format!("grid {dims:?} is too large")))?;
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a voxel center.
    pub fn position(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin_mm[a] + ijk[a] as f64 * self.spacing_mm[a])
    }

    /// Continuous voxel coordinate of a physical point.
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    /// Physical size covered by the voxel boxes along each axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing_mm[a])
    }

    pub fn full_region(&self) -> Region {
        Region {
            lo: [0; 3],
            hi: self.dims,
        }
    }

    /// Grid describing the voxels of `region`, positioned in the same
    /// physical space.
    pub fn sub_grid(&self, region: &Region) -> VoxelGrid {
        VoxelGrid {
            dims: region.dims(),
            spacing_mm: self.spacing_mm,
            origin_mm: self.position(region.lo),
        }
    }

    pub fn check_same(&self, other: &VoxelGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims,
                self.spacing_mm,
                self.origin_mm,
                other.dims,
                other.spacing_mm,
                other.origin_mm
            )))
        }
    }
}

/// Half-open box of voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grow by `by` voxels per axis, clipped to `[0, limit)`.
    pub fn expanded(&self, by: [usize; 3], limit: [usize; 3]) -> Region {
        Region {
            lo: std::array::from_fn(|a| self.lo[a].saturating_sub(by[a])),
            hi: std::array::from_fn(|a| (self.hi[a] + by[a]).min(limit[a])),
        }
    }
}

/// Copy the voxels of `region` out of a dense x-fastest array.
fn crop_slice<T: Copy>(data: &[T], dims: [usize; 3], region: &Region) -> Vec<T> {
    let rd = region.dims();
    let mut out = Vec::with_capacity(region.len());
    for k in region.lo[2]..region.hi[2] {
        for j in region.lo[1]..region.hi[1] {
            let start = region.lo[0] + dims[0] * (j + dims[1] * k);
            out.extend_from_slice(&data[start..start + rd[0]]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    grid: VoxelGrid,
    values: Vec<i16>,
}

impl CtVolume {
    pub fn new(grid: VoxelGrid, values: Vec<i16>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "volume has {} values for {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(Error::invalid(format!(
                "value {v} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn filled(grid: VoxelGrid, value: i16) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn from_fn(grid: VoxelGrid, f: impl Fn([usize; 3]) -> i16) -> Result<Self> {
        let values = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn into_values(self) -> Vec<i16> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> i16 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn crop(&self, region: &Region) -> CtVolume {
        CtVolume {
            grid: self.grid.sub_grid(region),
            values: crop_slice(&self.values, self.grid.dims, region),
        }
    }

    /// Reverse slice order so that z increases in the opposite direction.
    /// The origin keeps the position of the (new) first slice.
    pub fn flip_z(&self) -> CtVolume {
        let [nx, ny, nz] = self.grid.dims;
        let plane = nx * ny;
        let mut values = Vec::with_capacity(self.values.len());
        for k in (0..nz).rev() {
            values.extend_from_slice(&self.values[k * plane..(k + 1) * plane]);
        }
        CtVolume {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Real-valued field on a grid (feature maps, occupancies, intermediate
/// resampling results).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatVolume {
    pub grid: VoxelGrid,
    pub values: Vec<f32>,
}

impl FloatVolume {
    pub fn new(grid: VoxelGrid, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field has {} values for {} voxels",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.grid.index(i, j, k)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: VoxelGrid,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: VoxelGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::invalid(format!(
                "mask has {} bits for {} voxels",
                bits.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: VoxelGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            bits: vec![false; n],
        }
    }

    pub fn full(grid: VoxelGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            bits: vec![true; n],
        }
    }

    pub fn from_fn(grid: VoxelGrid, f: impl Fn([usize; 3]) -> bool) -> Self {
        let bits = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self { grid, bits }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.grid.index(i, j, k);
        self.bits[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the set voxels.
    pub fn bounding_box(&self) -> Option<Region> {
        let [nx, ny, nz] = self.grid.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for k in 0..nz {
            for j in 0..ny {
                let row = &self.bits[nx * (j + ny * k)..nx * (j + ny * k) + nx];
                let Some(first) = row.iter().position(|&b| b) else {
                    continue;
                };
                let last = row.iter().rposition(|&b| b).unwrap_or(first);
                any = true;
                lo[0] = lo[0].min(first);
                hi[0] = hi[0].max(last + 1);
                lo[1] = lo[1].min(j);
                hi[1] = hi[1].max(j + 1);
                lo[2] = lo[2].min(k);
                hi[2] = hi[2].max(k + 1);
            }
        }
        any.then_some(Region { lo, hi })
    }

    pub fn crop(&self, region: &Region) -> BinaryMask {
        BinaryMask {
            grid: self.grid.sub_grid(region),
            bits: crop_slice(&self.bits, self.grid.dims, region),
        }
    }

    /// Embed a mask cropped from this grid back at `region`; voxels outside
    /// the region are cleared.
    pub fn embed(grid: &VoxelGrid, sub: &BinaryMask, region: &Region) -> BinaryMask {
        let mut out = BinaryMask::empty(grid.clone());
        let rd = region.dims();
        let [nx, ny, _] = grid.dims;
        for k in 0..rd[2] {
            for j in 0..rd[1] {
                let src = rd[0] * (j + rd[1] * k);
                let dst = region.lo[0] + nx * (region.lo[1] + j + ny * (region.lo[2] + k));
                out.bits[dst..dst + rd[0]].copy_from_slice(&sub.bits[src..src + rd[0]]);
            }
        }
        out
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.grid.check_same(&other.grid)?;
        Ok(BinaryMask {
            grid: self.grid.clone(),
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Reverse slice order, as [`CtVolume::flip_z`].
    pub fn flip_z(&self) -> BinaryMask {
        let [nx, ny, nz] = self.grid.dims;
        let plane = nx * ny;
        let mut bits = Vec::with_capacity(self.bits.len());
        for k in (0..nz).rev() {
            bits.extend_from_slice(&self.bits[k * plane..(k + 1) * plane]);
        }
        BinaryMask {
            grid: self.grid.clone(),
            bits,
        }
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Voxels set here and not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// True when every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.grid.check_same(&other.grid)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }
}

/// Set bits where `lo_hu <= value <= hi_hu`.
pub fn threshold(vol: &CtVolume, lo_hu: f64, hi_hu: f64) -> Result<BinaryMask> {
    if lo_hu.is_nan() || hi_hu.is_nan() || lo_hu > hi_hu {
        return Err(Error::invalid(format!(
            "threshold bounds must satisfy lo <= hi, got [{lo_hu}, {hi_hu}]"
        )));
    }
    let bits = vol
        .values
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            lo_hu <= v && v <= hi_hu
        })
        .collect();
    Ok(BinaryMask {
        grid: vol.grid.clone(),
        bits,
    })
}

/// Physical volume of the set voxels in milliliters.
pub fn mask_volume_ml(mask: &BinaryMask) -> f64 {
    mask.count() as f64 * mask.grid.voxel_volume_mm3() / 1000.0
}
