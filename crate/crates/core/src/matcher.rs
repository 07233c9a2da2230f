//! Template search by normalized cross-correlation.
//!
//! The search runs on a soft-tissue feature map sampled at 2 mm. Each
//! placement of a (scaled) binary template is scored with the Pearson
//! correlation between template occupancy and feature values over the part
//! of the template's bounding box that lies inside the volume. Sums over
//! boxes come from summed-area tables; the template-weighted sum walks the
//! template's row runs over per-row prefix sums of the feature map.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::atlas::{LiverTemplate, TemplateAtlas, CANONICAL_SPACING_MM};
use crate::error::{Error, Result};
use crate::geometry::voxel_span;
use crate::volume::{downsample_area, BinaryMask, CtVolume, FloatVolume, VoxelGrid};

pub const FEATURE_SPACING_MM: f64 = CANONICAL_SPACING_MM;
pub const FEATURE_HU_RANGE: (f64, f64) = (-200.0, 300.0);
/// Gradient magnitude (HU/mm) at which the smoothness weight halves.
pub const GRADIENT_SCALE: f64 = 20.0;
pub const DEFAULT_TAU: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    grid: VoxelGrid,
    values: Vec<f32>,
}

impl FeatureVolume {
    pub fn new(grid: VoxelGrid, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "feature has {} values for {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("feature values must lie in [0, 1]"));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Affine-transformed copy without the [0, 1] check, for invariance tests.
    #[doc(hidden)]
    pub fn map_unchecked(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Soft-tissue candidacy map on the 2 mm grid.
pub fn soft_tissue_feature(vol: &CtVolume) -> Result<FeatureVolume> {
    soft_tissue_feature_smoothed(vol, 0.0)
}

/// As [`soft_tissue_feature`], with an optional Gaussian pre-smoothing of the
/// downsampled HU field (sigma in mm, 0 disables).
pub fn soft_tissue_feature_smoothed(vol: &CtVolume, pre_smooth_mm: f64) -> Result<FeatureVolume> {
    let mut hu = downsample_area(vol, [FEATURE_SPACING_MM; 3])?;
    if pre_smooth_mm > 0.0 {
        gaussian_blur(&mut hu, pre_smooth_mm);
    }
    Ok(feature_from_hu(&hu))
}

fn feature_from_hu(hu: &FloatVolume) -> FeatureVolume {
    let grid = hu.grid.clone();
    let [nx, ny, nz] = grid.dims();
    let s = grid.spacing();
    let v = &hu.values;
    let (lo, hi) = FEATURE_HU_RANGE;
    let plane = nx * ny;
    let diff = |idx: usize, pos: usize, n: usize, stride: usize, h: f64| -> f64 {
        if n < 2 {
            0.0
        } else if pos == 0 {
            (v[idx + stride] - v[idx]) as f64 / h
        } else if pos == n - 1 {
            (v[idx] - v[idx - stride]) as f64 / h
        } else {
            (v[idx + stride] - v[idx - stride]) as f64 / (2.0 * h)
        }
    };
    let mut out = vec![0f32; v.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = k * plane + j * nx + i;
                let x = v[idx] as f64;
                if !(lo..=hi).contains(&x) {
                    continue;
                }
                let gx = diff(idx, i, nx, 1, s[0]);
                let gy = diff(idx, j, ny, nx, s[1]);
                let gz = diff(idx, k, nz, plane, s[2]);
                let g2 = (gx * gx + gy * gy + gz * gz) / (GRADIENT_SCALE * GRADIENT_SCALE);
                slab[j * nx + i] = (1.0 / (1.0 + g2)) as f32;
            }
        }
    });
    FeatureVolume { grid, values: out }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(field: &mut FloatVolume, sigma_mm: f64) {
    let dims = field.grid.dims();
    let spacing = field.grid.spacing();
    for axis in 0..3 {
        let sigma = sigma_mm / spacing[axis];
        let radius = (3.0 * sigma).ceil() as isize;
        if radius < 1 || dims[axis] < 2 {
            continue;
        }
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let n = dims[axis] as isize;
        let src = field.values.clone();
        for (idx, out) in field.values.iter_mut().enumerate() {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let base = idx as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let p = (pos + t as isize - radius).clamp(0, n - 1);
                acc += w * src[(base + p * stride as isize) as usize] as f64;
            }
            *out = (acc / norm) as f32;
        }
    }
}

/// Summed-area tables and row prefix sums of a feature grid.
struct Level {
    dims: [usize; 3],
    sat: Vec<f64>,
    sat2: Vec<f64>,
    rows: Vec<f64>,
}

fn build_sat(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let (sx, sy) = (nx + 1, ny + 1);
    let mut sat = vec![0f64; sx * sy * (nz + 1)];
    for k in 0..nz {
        for j in 0..ny {
            let mut run = 0.0;
            for i in 0..nx {
                run += f(i + nx * (j + ny * k));
                let o = (i + 1) + sx * ((j + 1) + sy * (k + 1));
                sat[o] = run + sat[o - sx] + sat[o - sx * sy] - sat[o - sx - sx * sy];
            }
        }
    }
    sat
}

fn count_sat(dims: [usize; 3], bits: &[bool]) -> Vec<u32> {
    let [nx, ny, nz] = dims;
    let (sx, sy) = (nx + 1, ny + 1);
    let mut sat = vec![0u32; sx * sy * (nz + 1)];
    for k in 0..nz {
        for j in 0..ny {
            let mut run = 0;
            for i in 0..nx {
                run += bits[i + nx * (j + ny * k)] as u32;
                let o = (i + 1) + sx * ((j + 1) + sy * (k + 1));
                sat[o] = run + sat[o - sx] + sat[o - sx * sy] - sat[o - sx - sx * sy];
            }
        }
    }
    sat
}

fn box_sum(sat: &[f64], dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> f64 {
    let sx = dims[0] + 1;
    let sxy = sx * (dims[1] + 1);
    let at = |i: usize, j: usize, k: usize| sat[i + sx * j + sxy * k];
    at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2])
        - at(hi[0], hi[1], lo[2])
        + at(lo[0], lo[1], hi[2])
        + at(lo[0], hi[1], lo[2])
        + at(hi[0], lo[1], lo[2])
        - at(lo[0], lo[1], lo[2])
}

impl Level {
    fn new(dims: [usize; 3], values: &[f32]) -> Self {
        let sat = build_sat(dims, |i| values[i] as f64);
        let sat2 = build_sat(dims, |i| (values[i] as f64).powi(2));
        let nx = dims[0];
        let mut rows = vec![0f64; (nx + 1) * dims[1] * dims[2]];
        for (r, chunk) in values.chunks(nx).enumerate() {
            let base = r * (nx + 1);
            for (i, &v) in chunk.iter().enumerate() {
                rows[base + i + 1] = rows[base + i] + v as f64;
            }
        }
        Self {
            dims,
            sat,
            sat2,
            rows,
        }
    }
}

/// Row prefix sums of a grid zero-padded by `margin` voxels on both x ends,
/// so that a template row can be slid across every x-offset at once.
struct PaddedRows {
    dims: [usize; 3],
    margin: usize,
    width: usize,
    data: Vec<f64>,
}

impl PaddedRows {
    fn new(dims: [usize; 3], values: &[f32], margin: usize) -> Self {
        let width = dims[0] + 2 * margin + 1;
        let mut data = vec![0f64; width * dims[1] * dims[2]];
        for (r, chunk) in values.chunks(dims[0]).enumerate() {
            let row = &mut data[r * width..(r + 1) * width];
            for i in 1..width {
                let src = i as i64 - 1 - margin as i64;
                let v = if (0..dims[0] as i64).contains(&src) {
                    chunk[src as usize] as f64
                } else {
                    0.0
                };
                row[i] = row[i - 1] + v;
            }
        }
        Self {
            dims,
            margin,
            width,
            data,
        }
    }

    /// `acc[x]` = sum of values under the template placed at
    /// `(off[0] + x, off[1], off[2])`.
    fn cross_sums(&self, t: &RunTemplate, off: [i64; 3], acc: &mut [f64]) {
        acc.fill(0.0);
        let n = acc.len();
        debug_assert!(t.dims[0] <= self.margin);
        let shift = self.margin as i64 + off[0];
        for k in 0..t.dims[2] {
            let vk = k as i64 + off[2];
            if vk < 0 || vk >= self.dims[2] as i64 {
                continue;
            }
            for r in &t.runs[t.plane_start[k]..t.plane_start[k + 1]] {
                let vj = r.j as i64 + off[1];
                if vj < 0 || vj >= self.dims[1] as i64 {
                    continue;
                }
                let base = (vj as usize + self.dims[1] * vk as usize) * self.width;
                let a = (base as i64 + r.i0 as i64 + shift) as usize;
                let b = (base as i64 + r.i1 as i64 + shift) as usize;
                let hi = &self.data[b..b + n];
                let lo = &self.data[a..a + n];
                for ((s, h), l) in acc.iter_mut().zip(hi).zip(lo) {
                    *s += h - l;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Run {
    j: u32,
    i0: u32,
    i1: u32,
}

/// A binary template as row runs grouped by z-plane, plus a count SAT.
#[derive(Debug, Clone)]
struct RunTemplate {
    dims: [usize; 3],
    count: usize,
    sat: Vec<u32>,
    /// Per-axis prefix counts of the occupancy marginals.
    marginals: [Vec<u32>; 3],
    runs: Vec<Run>,
    plane_start: Vec<usize>,
    /// Occupancy centroid in voxel units.
    centroid: [f64; 3],
}

impl RunTemplate {
    fn from_bits(dims: [usize; 3], bits: &[bool]) -> Self {
        let [nx, ny, nz] = dims;
        let mut runs = Vec::new();
        let mut plane_start = Vec::with_capacity(nz + 1);
        let mut count = 0usize;
        let mut csum = [0f64; 3];
        for k in 0..nz {
            plane_start.push(runs.len());
            for j in 0..ny {
                let row = &bits[nx * (j + ny * k)..nx * (j + ny * k) + nx];
                let mut i = 0;
                while i < nx {
                    if !row[i] {
                        i += 1;
                        continue;
                    }
                    let start = i;
                    while i < nx && row[i] {
                        i += 1;
                    }
                    let len = i - start;
                    count += len;
                    csum[0] += (start + i - 1) as f64 * len as f64 / 2.0;
                    csum[1] += (j * len) as f64;
                    csum[2] += (k * len) as f64;
                    runs.push(Run {
                        j: j as u32,
                        i0: start as u32,
                        i1: i as u32,
                    });
                }
            }
        }
        plane_start.push(runs.len());
        let sat = count_sat(dims, bits);
        let mut marginals = dims.map(|d| vec![0u32; d + 1]);
        for (idx, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let ijk = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            for a in 0..3 {
                marginals[a][ijk[a] + 1] += 1;
            }
        }
        for m in &mut marginals {
            for i in 1..m.len() {
                m[i] += m[i - 1];
            }
        }
        let c = count.max(1) as f64;
        Self {
            dims,
            count,
            sat,
            marginals,
            runs,
            plane_start,
            centroid: csum.map(|s| s / c),
        }
    }

    /// Clipped template-index box for placement `off` on a grid of `dims`.
    fn clip(&self, off: [i64; 3], dims: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = (-off[a]).max(0);
            let h = (self.dims[a] as i64).min(dims[a] as i64 - off[a]);
            if h <= l {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some((lo, hi))
    }

    fn count_in(&self, lo: [usize; 3], hi: [usize; 3]) -> usize {
        let sx = self.dims[0] + 1;
        let sxy = sx * (self.dims[1] + 1);
        let at = |i: usize, j: usize, k: usize| self.sat[i + sx * j + sxy * k] as i64;
        (at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2])
            - at(hi[0], hi[1], lo[2])
            + at(lo[0], lo[1], hi[2])
            + at(lo[0], hi[1], lo[2])
            + at(hi[0], lo[1], lo[2])
            - at(lo[0], lo[1], lo[2])) as usize
    }

    fn visible(&self, off: [i64; 3], dims: [usize; 3]) -> usize {
        match self.clip(off, dims) {
            Some((lo, hi)) => self.count_in(lo, hi),
            None => 0,
        }
    }

    /// Upper bound on the visible count from the clip along axis `a` alone.
    fn axis_bound(&self, a: usize, off: i64, dim: usize) -> usize {
        let l = (-off).clamp(0, self.dims[a] as i64) as usize;
        let h = (dim as i64 - off).clamp(0, self.dims[a] as i64) as usize;
        if h <= l {
            0
        } else {
            (self.marginals[a][h] - self.marginals[a][l]) as usize
        }
    }

    /// Score for a placement whose cross sum is already known.
    fn ncc_with(&self, level: &Level, off: [i64; 3], sft: f64) -> f64 {
        let Some((lo, hi)) = self.clip(off, level.dims) else {
            return -1.0;
        };
        let n_t = self.count_in(lo, hi) as f64;
        let vlo = std::array::from_fn(|a| (lo[a] as i64 + off[a]) as usize);
        let vhi = std::array::from_fn(|a| (hi[a] as i64 + off[a]) as usize);
        let n = (0..3).map(|a| (hi[a] - lo[a]) as f64).product::<f64>();
        let sf = box_sum(&level.sat, level.dims, vlo, vhi);
        let sf2 = box_sum(&level.sat2, level.dims, vlo, vhi);
        pearson(n, n_t, sf, sf2, sft)
    }

    /// (score, visible voxel count).
    fn ncc(&self, level: &Level, off: [i64; 3]) -> (f64, usize) {
        let Some((lo, hi)) = self.clip(off, level.dims) else {
            return (-1.0, 0);
        };
        let n_t = self.count_in(lo, hi) as f64;
        let vlo = std::array::from_fn(|a| (lo[a] as i64 + off[a]) as usize);
        let vhi = std::array::from_fn(|a| (hi[a] as i64 + off[a]) as usize);
        let n = (0..3).map(|a| (hi[a] - lo[a]) as f64).product::<f64>();
        let sf = box_sum(&level.sat, level.dims, vlo, vhi);
        let sf2 = box_sum(&level.sat2, level.dims, vlo, vhi);
        let [nx, ny, _] = level.dims;
        let mut sft = 0.0;
        for k in lo[2]..hi[2] {
            let vk = (k as i64 + off[2]) as usize;
            for r in &self.runs[self.plane_start[k]..self.plane_start[k + 1]] {
                let j = r.j as usize;
                if j < lo[1] || j >= hi[1] {
                    continue;
                }
                let i0 = (r.i0 as usize).max(lo[0]);
                let i1 = (r.i1 as usize).min(hi[0]);
                if i0 >= i1 {
                    continue;
                }
                let vj = (j as i64 + off[1]) as usize;
                let base = (vj + ny * vk) * (nx + 1);
                let a = (i0 as i64 + off[0]) as usize;
                let b = (i1 as i64 + off[0]) as usize;
                sft += level.rows[base + b] - level.rows[base + a];
            }
        }
        (pearson(n, n_t, sf, sf2, sft), n_t as usize)
    }
}

/// Pearson correlation of a binary operand (n_t ones among n) with values
/// of sum `sf` and square sum `sf2`, given the cross sum `sft`.
fn pearson(n: f64, n_t: f64, sf: f64, sf2: f64, sft: f64) -> f64 {
    let var_t = n_t - n_t * n_t / n;
    let var_f = sf2 - sf * sf / n;
    let scale = sf2.abs().max(1.0);
    if var_t <= 0.5 / n || var_f <= 1e-12 * scale {
        return -1.0;
    }
    let cov = sft - sf * n_t / n;
    (cov / (var_t * var_f).sqrt()).clamp(-1.0, 1.0)
}

/// Occupancy threshold, a hair under one half so summation order cannot
/// flip exact ties.
const OCCUPANCY_CUT: f64 = 0.5 - 1e-9;

/// Trilinear sample of a mask's occupancy at fractional index `u`, zero
/// outside the grid.
fn sample_occupancy(mask: &BinaryMask, u: [f64; 3]) -> f64 {
    let dims = mask.grid().dims();
    let mut base = [0i64; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let f = u[a].floor();
        base[a] = f as i64;
        frac[a] = u[a] - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let p = base[a] + bit as i64;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if p < 0 || p >= dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = p as usize;
            }
        }
        if inside && w > 0.0 && mask.get(idx[0], idx[1], idx[2]) {
            acc += w;
        }
    }
    acc
}

/// Occupancy of `tmpl` scaled by `scale` on its own 2 mm lattice.
pub fn scaled_template(tmpl: &LiverTemplate, scale: f64) -> Result<BinaryMask> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be > 0, got {scale}")));
    }
    let src = tmpl.mask();
    let n = src.grid().dims();
    let dims = n.map(|d| ((d - 1) as f64 * scale + 1e-9).floor() as usize + 1);
    let grid = VoxelGrid::new(dims, [FEATURE_SPACING_MM; 3], [0.0; 3])?;
    if (scale - 1.0).abs() < 1e-12 {
        return BinaryMask::new(grid, src.bits().to_vec());
    }
    // Trilinear weights are separable, so interpolate one axis at a time.
    let taps: Vec<Vec<[(usize, f64); 2]>> = (0..3)
        .map(|a| {
            (0..dims[a])
                .map(|i| {
                    let u = i as f64 / scale;
                    let b = u.floor();
                    let f = u - b;
                    let b = b as usize;
                    let w1 = if b + 1 < n[a] { f } else { 0.0 };
                    let w0 = if b < n[a] { 1.0 - f } else { 0.0 };
                    [(b.min(n[a] - 1), w0), ((b + 1).min(n[a] - 1), w1)]
                })
                .collect()
        })
        .collect();
    let bits = src.bits();
    let [dx, dy, dz] = dims;
    let mut ax = vec![0f64; dx * n[1] * n[2]];
    for r in 0..n[1] * n[2] {
        let row = &bits[r * n[0]..(r + 1) * n[0]];
        for (i, t) in taps[0].iter().enumerate() {
            ax[r * dx + i] = t.iter().filter(|&&(p, _)| row[p]).map(|&(_, w)| w).sum();
        }
    }
    let mut ay = vec![0f64; dx * dy * n[2]];
    for k in 0..n[2] {
        for (j, t) in taps[1].iter().enumerate() {
            let out = &mut ay[(j + dy * k) * dx..(j + dy * k + 1) * dx];
            for &(p, w) in t {
                if w > 0.0 {
                    let src_row = &ax[(p + n[1] * k) * dx..(p + n[1] * k + 1) * dx];
                    out.iter_mut().zip(src_row).for_each(|(o, v)| *o += w * v);
                }
            }
        }
    }
    let mut out = vec![false; dx * dy * dz];
    let plane = dx * dy;
    let mut acc = vec![0f64; plane];
    for (k, t) in taps[2].iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for &(p, w) in t {
            if w > 0.0 {
                let src_plane = &ay[p * plane..(p + 1) * plane];
                acc.iter_mut().zip(src_plane).for_each(|(o, v)| *o += w * v);
            }
        }
        for (o, &v) in out[k * plane..(k + 1) * plane].iter_mut().zip(&acc) {
            *o = v >= OCCUPANCY_CUT;
        }
    }
    BinaryMask::new(grid, out)
}

/// Rasterize `tmpl` placed at `offset_mm` with `scale` onto an arbitrary grid.
pub fn place_template(
    tmpl: &LiverTemplate,
    grid: &VoxelGrid,
    offset_mm: [f64; 3],
    scale: f64,
) -> Result<BinaryMask> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be > 0, got {scale}")));
    }
    let src = tmpl.mask();
    let step = FEATURE_SPACING_MM * scale;
    let n = src.grid().dims();
    let hi: [f64; 3] = std::array::from_fn(|a| offset_mm[a] + (n[a] - 1) as f64 * step);
    let mut out = BinaryMask::empty(grid.clone());
    let Some(region) = voxel_span(grid, offset_mm, hi) else {
        return Ok(out);
    };
    for k in region.lo[2]..region.hi[2] {
        for j in region.lo[1]..region.hi[1] {
            for i in region.lo[0]..region.hi[0] {
                let p = grid.position([i, j, k]);
                let u = std::array::from_fn(|a| (p[a] - offset_mm[a]) / step);
                if sample_occupancy(src, u) >= OCCUPANCY_CUT {
                    out.set(i, j, k, true);
                }
            }
        }
    }
    Ok(out)
}

fn voxel_offset(feat: &FeatureVolume, offset_mm: [f64; 3]) -> [i64; 3] {
    let o = feat.grid.origin();
    std::array::from_fn(|a| ((offset_mm[a] - o[a]) / FEATURE_SPACING_MM).round() as i64)
}

fn offset_mm(feat: &FeatureVolume, off: [i64; 3]) -> [f64; 3] {
    let o = feat.grid.origin();
    std::array::from_fn(|a| o[a] + off[a] as f64 * FEATURE_SPACING_MM)
}

/// Score one placement: (Pearson score, visible fraction). The offset is
/// snapped to the nearest feature voxel.
pub fn ncc_score(
    tmpl: &LiverTemplate,
    feat: &FeatureVolume,
    offset_mm: [f64; 3],
    scale: f64,
) -> Result<(f64, f64)> {
    let scaled = scaled_template(tmpl, scale)?;
    let rt = RunTemplate::from_bits(scaled.grid().dims(), scaled.bits());
    let level = Level::new(feat.grid.dims(), &feat.values);
    let (score, visible) = rt.ncc(&level, voxel_offset(feat, offset_mm));
    Ok((score, visible as f64 / rt.count.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub template_id: String,
    /// Physical position of the template's first voxel.
    pub offset_mm: [f64; 3],
    pub scale: f64,
    pub score: f64,
    pub visible_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Found(MatchResult),
    /// Every candidate fell below the visibility floor.
    NotFound { best_score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_step: f64,
    pub coarse_step_mm: f64,
    pub visibility_floor: f64,
    /// Slack on the template centroid around the gated z-range.
    pub z_margin_mm: f64,
    pub top_k: usize,
    pub fine_window_mm: f64,
    pub fine_scale_delta: f64,
    pub fine_scale_step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.80,
            scale_max: 1.25,
            scale_step: 0.05,
            coarse_step_mm: 8.0,
            visibility_floor: 0.4,
            z_margin_mm: 30.0,
            top_k: 5,
            fine_window_mm: 8.0,
            fine_scale_delta: 0.05,
            fine_scale_step: 0.025,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_max >= self.scale_min
            && self.scale_step > 0.0
            && self.coarse_step_mm >= FEATURE_SPACING_MM
            && (0.0..=1.0).contains(&self.visibility_floor)
            && self.z_margin_mm >= 0.0
            && self.top_k >= 1
            && self.fine_window_mm >= 0.0
            && self.fine_scale_delta >= 0.0
            && self.fine_scale_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search configuration {self:?}")))
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        let n = ((self.scale_max - self.scale_min) / self.scale_step + 1e-6).floor() as usize;
        (0..=n)
            .map(|i| quantize(self.scale_min + i as f64 * self.scale_step))
            .collect()
    }

    fn fine_scales(&self, center: f64) -> Vec<f64> {
        let n = (self.fine_scale_delta / self.fine_scale_step + 1e-6).floor() as i64;
        let mut out: Vec<f64> = (-n..=n)
            .map(|d| quantize(center + d as f64 * self.fine_scale_step))
            .filter(|&s| s >= self.scale_min - 1e-9 && s <= self.scale_max + 1e-9)
            .collect();
        out.dedup();
        out
    }

    /// Penalized ranking score: monotone in both score and visibility.
    pub fn penalized(&self, score: f64, visible_fraction: f64) -> f64 {
        if self.visibility_floor <= 0.0 {
            return score;
        }
        score * (visible_fraction / self.visibility_floor).min(1.0)
    }
}

fn quantize(s: f64) -> f64 {
    (s * 1e6).round() / 1e6
}

fn scale_key(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

#[derive(Debug, Clone)]
struct Candidate {
    template: usize,
    scale: f64,
    off: [i64; 3],
    score: f64,
    visible: f64,
    penalized: f64,
}

/// Higher penalized score, then higher score, then lower template id, then
/// lexicographic offset, then smaller scale.
fn rank(a: &Candidate, b: &Candidate, ids: &[&str]) -> Ordering {
    b.penalized
        .total_cmp(&a.penalized)
        .then(b.score.total_cmp(&a.score))
        .then(ids[a.template].cmp(ids[b.template]))
        .then(a.off.cmp(&b.off))
        .then(a.scale.total_cmp(&b.scale))
}

#[derive(Debug, Clone)]
struct Scaled {
    fine: RunTemplate,
    coarse: RunTemplate,
}

impl Scaled {
    fn build(t: &LiverTemplate, s: f64, factor: usize) -> Result<Self> {
        let m = scaled_template(t, s)?;
        let dims = m.grid().dims();
        let (cd, cb) = pool_bits(dims, m.bits(), factor);
        Ok(Self {
            fine: RunTemplate::from_bits(dims, m.bits()),
            coarse: RunTemplate::from_bits(cd, &cb),
        })
    }
}

fn pool_bits(dims: [usize; 3], bits: &[bool], f: usize) -> ([usize; 3], Vec<bool>) {
    let cd = dims.map(|d| d.div_ceil(f));
    let mut counts = vec![0u32; cd[0] * cd[1] * cd[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if bits[i + dims[0] * (j + dims[1] * k)] {
                    counts[i / f + cd[0] * (j / f + cd[1] * (k / f))] += 1;
                }
            }
        }
    }
    let full = (f * f * f) as u32;
    (cd, counts.into_iter().map(|c| 2 * c >= full).collect())
}

fn pool_values(dims: [usize; 3], values: &[f32], f: usize) -> ([usize; 3], Vec<f32>) {
    let cd = dims.map(|d| d.div_ceil(f));
    let mut sums = vec![0f64; cd[0] * cd[1] * cd[2]];
    let mut counts = vec![0u32; sums.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = i / f + cd[0] * (j / f + cd[1] * (k / f));
                sums[c] += values[i + dims[0] * (j + dims[1] * k)] as f64;
                counts[c] += 1;
            }
        }
    }
    let vals = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    (cd, vals)
}

/// Scaled templates for every (template, scale) pair of a configuration,
/// reusable across volumes.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    ids: Vec<String>,
    atlas: TemplateAtlas,
    cfg: SearchConfig,
    factor: usize,
    scales: Vec<f64>,
    /// Indexed by `template * scales.len() + scale`.
    scaled: Vec<Scaled>,
    /// Widest coarse template.
    margin: usize,
}

/// Per-volume state shared by the coarse scans.
struct Volume<'a> {
    fdims: [usize; 3],
    cdims: [usize; 3],
    coarse: Level,
    padded: PaddedRows,
    origin_z: f64,
    z_lo: f64,
    z_hi: f64,
    ids: &'a [&'a str],
}

impl SearchIndex {
    pub fn new(atlas: &TemplateAtlas, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let factor = ((cfg.coarse_step_mm / FEATURE_SPACING_MM).round() as usize).max(1);
        let scales = cfg.scales();
        let pairs: Vec<(usize, f64)> = (0..atlas.len())
            .flat_map(|t| scales.iter().map(move |&s| (t, s)))
            .collect();
        let scaled = pairs
            .par_iter()
            .map(|&(t, s)| Scaled::build(&atlas.templates()[t], s, factor))
            .collect::<Result<Vec<_>>>()?;
        let margin = scaled.iter().map(|s| s.coarse.dims[0]).max().unwrap_or(1);
        Ok(Self {
            ids: atlas.templates().iter().map(|t| t.id().to_string()).collect(),
            atlas: atlas.clone(),
            cfg: cfg.clone(),
            factor,
            scales,
            scaled,
            margin,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    fn cached(&self, t: usize, s: f64) -> Option<&Scaled> {
        let i = self.scales.iter().position(|&v| scale_key(v) == scale_key(s))?;
        Some(&self.scaled[t * self.scales.len() + i])
    }

    /// Coarse placements of one (template, scale) pair. With `collect`, the
    /// best `keep` placements at or above the prefilter floor; otherwise the
    /// best score among placements that are partly visible but below it.
    fn coarse_scan(&self, pair: usize, v: &Volume, keep: usize, collect: bool) -> (Vec<Candidate>, f64) {
        let t = pair / self.scales.len();
        let s = self.scales[pair % self.scales.len()];
        let sc = &self.scaled[pair];
        let cfg = &self.cfg;
        let f = self.factor as i64;
        let tc = &sc.coarse;
        let tf = &sc.fine;
        let cz = tf.centroid[2];
        // Coarse z-offsets whose centroid lands in [z_lo, z_hi].
        let kmin = ((v.z_lo - v.origin_z) / FEATURE_SPACING_MM - cz) / f as f64;
        let kmax = ((v.z_hi - v.origin_z) / FEATURE_SPACING_MM - cz) / f as f64;
        let floor = cfg.visibility_floor - 0.02;
        let need = if collect {
            (floor * tf.count as f64).ceil().max(1.0) as usize
        } else {
            1
        };
        let ox_min = 1 - tc.dims[0] as i64;
        let ox_max = v.cdims[0] as i64 - 1;
        let mut acc = Vec::new();
        let mut found = Vec::with_capacity(4 * keep);
        // Penalized score of the worst survivor after the last prune.
        let mut cut = f64::NEG_INFINITY;
        let mut rejected = f64::NEG_INFINITY;
        for oz in kmin.ceil() as i64..=kmax.floor() as i64 {
            if tf.axis_bound(2, oz * f, v.fdims[2]) < need {
                continue;
            }
            for oy in 1 - tc.dims[1] as i64..v.cdims[1] as i64 {
                if tf.axis_bound(1, oy * f, v.fdims[1]) < need {
                    continue;
                }
                let passes = |ox: i64| tf.axis_bound(0, ox * f, v.fdims[0]) >= need;
                let Some(xa) = (ox_min..=ox_max).find(|&ox| passes(ox)) else {
                    continue;
                };
                let xb = (xa..=ox_max).rev().find(|&ox| passes(ox)).unwrap_or(xa);
                acc.resize((xb - xa + 1) as usize, 0.0);
                v.padded.cross_sums(tc, [xa, oy, oz], &mut acc);
                for (x, &sft) in acc.iter().enumerate() {
                    let off = [xa + x as i64, oy, oz];
                    let fine_off = off.map(|c| c * f);
                    let visible = tf.visible(fine_off, v.fdims);
                    let vf = visible as f64 / tf.count as f64;
                    if !collect {
                        if visible > 0 && vf < floor {
                            rejected = rejected.max(tc.ncc_with(&v.coarse, off, sft));
                        }
                        continue;
                    }
                    if vf < floor {
                        continue;
                    }
                    let score = tc.ncc_with(&v.coarse, off, sft);
                    let penalized = cfg.penalized(score, vf);
                    if found.len() >= keep && penalized < cut {
                        continue;
                    }
                    found.push(Candidate {
                        template: t,
                        scale: s,
                        off: fine_off,
                        score,
                        visible: vf,
                        penalized,
                    });
                    if found.len() >= 4 * keep {
                        found.select_nth_unstable_by(keep - 1, |a, b| rank(a, b, v.ids));
                        found.truncate(keep);
                        cut = found.iter().fold(f64::INFINITY, |m, c| m.min(c.penalized));
                    }
                }
            }
        }
        found.sort_by(|a, b| rank(a, b, v.ids));
        found.truncate(keep);
        (found, rejected)
    }

    /// Coarse-to-fine search. `z_range_mm` is the gated liver interval in
    /// physical z.
    pub fn search(&self, feat: &FeatureVolume, z_range_mm: (f64, f64)) -> Result<SearchOutcome> {
        if !(z_range_mm.1 > z_range_mm.0) {
            return Err(Error::invalid(format!("empty z-range {z_range_mm:?}")));
        }
        let cfg = &self.cfg;
        let ids: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        let fdims = feat.grid.dims();
        let fine_level = Level::new(fdims, &feat.values);
        let (cdims, cvals) = pool_values(fdims, &feat.values, self.factor);
        let vol = Volume {
            fdims,
            cdims,
            coarse: Level::new(cdims, &cvals),
            padded: PaddedRows::new(cdims, &cvals, self.margin),
            origin_z: feat.grid.origin()[2],
            z_lo: z_range_mm.0 - cfg.z_margin_mm,
            z_hi: z_range_mm.1 + cfg.z_margin_mm,
            ids: &ids,
        };
        let keep = cfg.top_k * 8;
        let mut coarse: Vec<Candidate> = (0..self.scaled.len())
            .into_par_iter()
            .map(|p| self.coarse_scan(p, &vol, keep, true).0)
            .collect::<Vec<_>>()
            .concat();
        coarse.sort_by(|a, b| rank(a, b, &ids));

        // Greedy top-k, skipping candidates the refinement of an earlier pick
        // already covers.
        let win = (cfg.fine_window_mm / FEATURE_SPACING_MM).round() as i64;
        let mut picked: Vec<Candidate> = Vec::new();
        for c in coarse {
            if picked.len() == cfg.top_k {
                break;
            }
            let covered = picked.iter().any(|p| {
                p.template == c.template
                    && (p.scale - c.scale).abs() <= cfg.fine_scale_delta + 1e-9
                    && (0..3).all(|a| (p.off[a] - c.off[a]).abs() <= win)
            });
            if !covered {
                picked.push(c);
            }
        }

        let mut extra: HashMap<(usize, i64), RunTemplate> = HashMap::new();
        let mut jobs: Vec<(usize, f64, [i64; 3])> = Vec::new();
        for p in &picked {
            let center = self.cached(p.template, p.scale).expect("coarse scale").fine.centroid;
            for s in cfg.fine_scales(p.scale) {
                let key = (p.template, scale_key(s));
                if self.cached(p.template, s).is_none() && !extra.contains_key(&key) {
                    let t = &self.atlas.templates()[p.template];
                    extra.insert(key, Scaled::build(t, s, self.factor)?.fine);
                }
                let c = self.fine_template(&extra, p.template, s).centroid;
                // Scale about the centroid rather than the template corner.
                let base = std::array::from_fn(|a| p.off[a] + (center[a] - c[a]).round() as i64);
                jobs.push((p.template, s, base));
            }
        }
        let fine_runs: Vec<(Option<Candidate>, f64)> = jobs
            .par_iter()
            .map(|&(t, s, base)| {
                let rt = self.fine_template(&extra, t, s);
                let mut best: Option<Candidate> = None;
                let mut rejected = f64::NEG_INFINITY;
                for dz in -win..=win {
                    for dy in -win..=win {
                        for dx in -win..=win {
                            let off = [base[0] + dx, base[1] + dy, base[2] + dz];
                            let (score, visible) = rt.ncc(&fine_level, off);
                            let vf = visible as f64 / rt.count as f64;
                            if vf < cfg.visibility_floor || visible == 0 {
                                rejected = rejected.max(score);
                                continue;
                            }
                            let c = Candidate {
                                template: t,
                                scale: s,
                                off,
                                score,
                                visible: vf,
                                penalized: cfg.penalized(score, vf),
                            };
                            if best.as_ref().is_none_or(|b| rank(&c, b, &ids) == Ordering::Less) {
                                best = Some(c);
                            }
                        }
                    }
                }
                (best, rejected)
            })
            .collect();

        let mut best: Option<Candidate> = None;
        let mut best_rejected = f64::NEG_INFINITY;
        for (c, r) in fine_runs {
            best_rejected = best_rejected.max(r);
            if let Some(c) = c {
                if best.as_ref().is_none_or(|b| rank(&c, b, &ids) == Ordering::Less) {
                    best = Some(c);
                }
            }
        }
        if let Some(c) = best {
            return Ok(SearchOutcome::Found(MatchResult {
                template_id: ids[c.template].to_string(),
                offset_mm: offset_mm(feat, c.off),
                scale: c.scale,
                score: c.score,
                visible_fraction: c.visible,
            }));
        }
        // Nothing survived: report the best placement the floor rejected.
        let coarse_rejected = (0..self.scaled.len())
            .into_par_iter()
            .map(|p| self.coarse_scan(p, &vol, keep, false).1)
            .reduce(|| f64::NEG_INFINITY, f64::max);
        let r = best_rejected.max(coarse_rejected);
        Ok(SearchOutcome::NotFound {
            best_score: if r.is_finite() { r } else { -1.0 },
        })
    }

    fn fine_template<'a>(
        &'a self,
        extra: &'a HashMap<(usize, i64), RunTemplate>,
        t: usize,
        s: f64,
    ) -> &'a RunTemplate {
        match self.cached(t, s) {
            Some(sc) => &sc.fine,
            None => &extra[&(t, scale_key(s))],
        }
    }
}

/// Coarse-to-fine search over templates, scales and translations.
/// `z_range_mm` is the gated liver interval in physical z. Build a
/// [`SearchIndex`] instead when searching many volumes.
pub fn search(
    feat: &FeatureVolume,
    atlas: &TemplateAtlas,
    z_range_mm: (f64, f64),
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    if !(z_range_mm.1 > z_range_mm.0) {
        return Err(Error::invalid(format!("empty z-range {z_range_mm:?}")));
    }
    SearchIndex::new(atlas, cfg)?.search(feat, z_range_mm)
}

/// Detection decision at threshold `tau`.
pub fn decide(score: f64, tau: f64) -> Result<bool> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(score >= tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::LiverShapeType;

    fn cube_template() -> LiverTemplate {
        let g = VoxelGrid::new([6, 5, 4], [2.0; 3], [0.0; 3]).unwrap();
        let m = BinaryMask::from_fn(g, |[i, j, k]| {
            (1..5).contains(&i) && (1..4).contains(&j) && (1..3).contains(&k)
        });
        LiverTemplate::new("c".into(), LiverShapeType::I, m, 4.0).unwrap()
    }

    fn feature_of(g: &VoxelGrid, f: impl Fn([usize; 3]) -> f32) -> FeatureVolume {
        let vals = (0..g.len()).map(|i| f(g.coords(i))).collect();
        FeatureVolume::new(g.clone(), vals).unwrap()
    }

    #[test]
    fn homogeneous_volumes() {
        let g = VoxelGrid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let soft = soft_tissue_feature(&CtVolume::filled(g.clone(), 40).unwrap()).unwrap();
        assert!(soft.values().iter().all(|&v| v == 1.0));
        let lung = soft_tissue_feature(&CtVolume::filled(g, -800).unwrap()).unwrap();
        assert!(lung.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn steep_edge_is_suppressed() {
        let g = VoxelGrid::new([20, 4, 4], [2.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::from_fn(g, |[i, _, _]| if i < 10 { -150 } else { 250 }).unwrap();
        let f = soft_tissue_feature(&v).unwrap();
        // 400 HU over 4 mm = 100 HU/mm at the edge.
        let at = |i| f.values()[i];
        assert!(at(9) < 0.05 && at(10) < 0.05);
        assert_eq!(at(2), 1.0);
    }

    #[test]
    fn self_and_anti_correlation() {
        let t = cube_template();
        let g = t.mask().grid().clone();
        let own = feature_of(&g, |[i, j, k]| t.mask().get(i, j, k) as u8 as f32);
        let (s, vf) = ncc_score(&t, &own, [0.0; 3], 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(vf, 1.0);
        let inv = feature_of(&g, |[i, j, k]| 1.0 - t.mask().get(i, j, k) as u8 as f32);
        let (s, _) = ncc_score(&t, &inv, [0.0; 3], 1.0).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_scores_minus_one() {
        let t = cube_template();
        let g = VoxelGrid::new([8, 8, 8], [2.0; 3], [0.0; 3]).unwrap();
        let flat = feature_of(&g, |_| 0.5);
        assert_eq!(ncc_score(&t, &flat, [2.0, 2.0, 2.0], 1.0).unwrap().0, -1.0);
    }

    #[test]
    fn partial_visibility() {
        let t = cube_template();
        let g = VoxelGrid::new([8, 8, 8], [2.0; 3], [0.0; 3]).unwrap();
        let f = feature_of(&g, |[i, _, _]| (i % 3) as f32 / 2.0);
        // Shift two voxels off the low-x edge: template columns 0, 1 leave.
        let (_, vf) = ncc_score(&t, &f, [-4.0, 0.0, 0.0], 1.0).unwrap();
        assert!((vf - 0.75).abs() < 1e-12);
        let (s, vf) = ncc_score(&t, &f, [-40.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!((s, vf), (-1.0, 0.0));
    }

    #[test]
    fn scaled_template_dims() {
        let t = cube_template();
        assert_eq!(scaled_template(&t, 1.0).unwrap(), *t.mask());
        let m = scaled_template(&t, 1.5).unwrap();
        assert_eq!(m.grid().dims(), [8, 7, 5]);
        assert!(scaled_template(&t, 0.0).is_err());
    }

    #[test]
    fn separable_scaling_matches_pointwise_oracle() {
        let atlas = crate::atlas::generate_reference_atlas(3).unwrap();
        let t = &atlas.templates()[4];
        for &s in &[0.8, 0.875, 0.95, 1.05, 1.125, 1.25] {
            let fast = scaled_template(t, s).unwrap();
            let oracle = BinaryMask::from_fn(fast.grid().clone(), |[i, j, k]| {
                let u = [i as f64 / s, j as f64 / s, k as f64 / s];
                sample_occupancy(t.mask(), u) >= OCCUPANCY_CUT
            });
            assert_eq!(fast, oracle, "scale {s}");
        }
    }

    #[test]
    fn placement_matches_scaled_lattice() {
        let t = cube_template();
        let scaled = scaled_template(&t, 1.25).unwrap();
        let g = VoxelGrid::new([12, 12, 12], [2.0; 3], [-3.0, 1.0, 5.0]).unwrap();
        let off = [1.0, 3.0, 9.0];
        let placed = place_template(&t, &g, off, 1.25).unwrap();
        assert_eq!(placed.count(), scaled.count());
    }

    #[test]
    fn decide_is_inclusive() {
        assert!(decide(0.9, 0.35).unwrap());
        assert!(!decide(0.34, 0.35).unwrap());
        assert!(decide(0.35, 0.35).unwrap());
        assert!(decide(0.5, 1.0).is_err());
    }

    #[test]
    fn config_scales() {
        let c = SearchConfig::default();
        assert_eq!(
            c.scales(),
            vec![0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25]
        );
        assert_eq!(c.fine_scales(0.8), vec![0.8, 0.825, 0.85]);
        assert_eq!(c.fine_scales(1.0).len(), 5);
        assert!(c.penalized(0.8, 0.2) < c.penalized(0.8, 0.3));
        assert_eq!(c.penalized(0.8, 0.9), 0.8);
    }
}
