//! Boundary refinement of a placed template by mode-gated region growing.

use std::collections::VecDeque;

use crate::densitometry::{analyze, DensityParams, DensityReport};
use crate::error::{Error, Result};
use crate::volume::{largest_component, morph, BinaryMask, CtVolume, MorphOp, VoxelGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    /// Half-width of the per-mode acceptance band, in mode standard deviations.
    pub mode_gate_sigma: f64,
    pub max_surface_dist_mm: f64,
    pub closing_mm: f64,
    pub seed_erosion_mm: f64,
    pub max_sweeps: usize,
    /// Accepted range of final/template voxel ratios; outside it the
    /// placement is kept unrefined.
    pub size_ratio: (f64, f64),
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            mode_gate_sigma: 2.5,
            max_surface_dist_mm: 15.0,
            closing_mm: 3.0,
            seed_erosion_mm: 4.0,
            max_sweeps: 100,
            size_ratio: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub final_mask: BinaryMask,
    pub added: BinaryMask,
    pub excluded: BinaryMask,
    /// Growth sweeps until the fixpoint.
    pub iterations: usize,
    /// Set when refinement failed and `final_mask` is the unrefined template.
    pub fallback: Option<String>,
}

impl RefinementResult {
    pub fn is_fallback(&self) -> bool {
        self.fallback.is_some()
    }

    fn unrefined(template: &BinaryMask, reason: String) -> Self {
        Self {
            final_mask: template.clone(),
            added: BinaryMask::empty(template.grid().clone()),
            excluded: BinaryMask::empty(template.grid().clone()),
            iterations: 0,
            fallback: Some(reason),
        }
    }
}

/// Smallest std used for the acceptance band, so that noiseless volumes
/// still accept their own values.
const MIN_GATE_STD_HU: f64 = 1.0;

/// HU bands accepted by the consistency predicate.
pub fn consistency_bands(report: &DensityReport, gate_sigma: f64) -> Vec<(f64, f64)> {
    report
        .modes
        .iter()
        .map(|m| {
            let half = gate_sigma * m.core_std_hu.max(MIN_GATE_STD_HU);
            (m.core_mean_hu - half, m.core_mean_hu + half)
        })
        .collect()
}

pub fn refine_boundary(
    vol: &CtVolume,
    template: &BinaryMask,
    report: &DensityReport,
    params: &RefineParams,
) -> Result<RefinementResult> {
    vol.grid().check_same(template.grid())?;
    if report.modes.is_empty() {
        return Err(Error::invalid("refinement needs at least one density mode"));
    }
    let Some(bbox) = template.bounding_box() else {
        return Err(Error::invalid("cannot refine an empty template placement"));
    };
    let grid = vol.grid();
    let margin = grid
        .spacing()
        .map(|s| (params.max_surface_dist_mm / s).ceil() as usize + 1);
    let roi = bbox.expanded(margin, grid.dims());
    let sub_vol = vol.crop(&roi);
    let sub_tmpl = template.crop(&roi);

    let bands = consistency_bands(report, params.mode_gate_sigma);
    let f = block_factors(grid.spacing());
    let grown = if f == [1, 1, 1] {
        grow_region(&sub_vol, &sub_tmpl, &bands, params)?
    } else {
        let coarse = grow_region(&block_mean(&sub_vol, f)?, &block_majority(&sub_tmpl, f), &bands, params)?;
        coarse.map(|(m, it)| -> Result<_> {
            let allowed = morph(&sub_tmpl, MorphOp::Dilate, params.max_surface_dist_mm)?;
            Ok((largest_component(&block_expand(&m, sub_tmpl.grid(), f).and(&allowed)?), it))
        })
        .transpose()?
    };
    let Some((sub_final, iterations)) = grown else {
        return Ok(RefinementResult::unrefined(template, "empty seed".into()));
    };

    let ratio = sub_final.count() as f64 / sub_tmpl.count() as f64;
    if ratio < params.size_ratio.0 || ratio > params.size_ratio.1 {
        return Ok(RefinementResult::unrefined(
            template,
            format!("refined size ratio {ratio:.2} out of range"),
        ));
    }

    let final_mask = BinaryMask::embed(grid, &sub_final, &roi);
    let added = final_mask.minus(template)?;
    let excluded = template.minus(&final_mask)?;
    Ok(RefinementResult {
        final_mask,
        added,
        excluded,
        iterations,
        fallback: None,
    })
}

/// Seed, grow, close and keep the largest component. `None` for an empty seed.
fn grow_region(
    vol: &CtVolume,
    tmpl: &BinaryMask,
    bands: &[(f64, f64)],
    params: &RefineParams,
) -> Result<Option<(BinaryMask, usize)>> {
    let consistent: Vec<bool> = vol
        .values()
        .iter()
        .map(|&v| {
            let x = f64::from(v);
            bands.iter().any(|&(lo, hi)| lo <= x && x <= hi)
        })
        .collect();
    let consistent = BinaryMask::new(vol.grid().clone(), consistent)?;
    let allowed = morph(tmpl, MorphOp::Dilate, params.max_surface_dist_mm)?;

    let core = morph(&tmpl.and(&consistent)?, MorphOp::Erode, params.seed_erosion_mm)?;
    let seed = largest_component(&core);
    if seed.is_empty() {
        return Ok(None);
    }
    let passable = consistent.and(&allowed)?;
    let (grown, iterations) = grow(&seed, &passable, params.max_sweeps);
    let closed = morph(&grown, MorphOp::Close, params.closing_mm)?.and(&allowed)?;
    Ok(Some((largest_component(&closed), iterations)))
}

/// Voxel spacing refinement works at. Finer inputs are block-averaged to
/// about this size so seed erosion and the sweep cap see the same noise
/// texture at any resolution.
pub const WORK_SPACING_MM: f64 = 2.0;

fn block_factors(spacing: [f64; 3]) -> [usize; 3] {
    spacing.map(|s| ((WORK_SPACING_MM / s).round() as usize).max(1))
}

fn block_grid(grid: &VoxelGrid, f: [usize; 3]) -> Result<VoxelGrid> {
    let d = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();
    VoxelGrid::new(
        std::array::from_fn(|a| d[a].div_ceil(f[a])),
        std::array::from_fn(|a| s[a] * f[a] as f64),
        std::array::from_fn(|a| o[a] + (f[a] - 1) as f64 * s[a] / 2.0),
    )
}

/// Per-block sums and voxel counts; edge blocks may be partial.
fn block_sums<T>(grid: &VoxelGrid, f: [usize; 3], values: &[T], w: impl Fn(&T) -> f64) -> Result<(VoxelGrid, Vec<f64>, Vec<u32>)> {
    let cg = block_grid(grid, f)?;
    let [nx, ny, nz] = grid.dims();
    let [cx, cy, _] = cg.dims();
    let mut sum = vec![0.0; cg.len()];
    let mut n = vec![0u32; cg.len()];
    for k in 0..nz {
        for j in 0..ny {
            let row = cx * (j / f[1] + cy * (k / f[2]));
            let src = nx * (j + ny * k);
            for i in 0..nx {
                sum[row + i / f[0]] += w(&values[src + i]);
                n[row + i / f[0]] += 1;
            }
        }
    }
    Ok((cg, sum, n))
}

fn block_mean(vol: &CtVolume, f: [usize; 3]) -> Result<CtVolume> {
    let (cg, sum, n) = block_sums(vol.grid(), f, vol.values(), |&v| f64::from(v))?;
    let values = sum.iter().zip(&n).map(|(&s, &c)| (s / f64::from(c)).round() as i16).collect();
    CtVolume::new(cg, values)
}

fn block_majority(mask: &BinaryMask, f: [usize; 3]) -> BinaryMask {
    let (cg, sum, n) = block_sums(mask.grid(), f, mask.bits(), |&b| f64::from(u8::from(b)))
        .expect("block grid of a valid grid is valid");
    let bits = sum.iter().zip(&n).map(|(&s, &c)| 2.0 * s >= f64::from(c)).collect();
    BinaryMask::new(cg, bits).expect("same size")
}

fn block_expand(coarse: &BinaryMask, fine: &VoxelGrid, f: [usize; 3]) -> BinaryMask {
    BinaryMask::from_fn(fine.clone(), |[i, j, k]| coarse.get(i / f[0], j / f[1], k / f[2]))
}

/// Breadth-first growth from `seed` through `passable` (6-connected). Each
/// sweep advances the whole frontier by one voxel; returns the grown mask
/// and the number of sweeps that added voxels.
fn grow(seed: &BinaryMask, passable: &BinaryMask, max_sweeps: usize) -> (BinaryMask, usize) {
    let [nx, ny, nz] = seed.grid().dims();
    let plane = nx * ny;
    let mut out = seed.clone();
    let pass = passable.bits();
    let mut frontier: VecDeque<usize> = (0..out.bits().len()).filter(|&i| out.bits()[i]).collect();
    let mut sweeps = 0;
    while !frontier.is_empty() && sweeps < max_sweeps {
        let mut next = VecDeque::new();
        let bits = out.bits_mut();
        for idx in frontier {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / plane;
            let mut visit = |n: usize| {
                if pass[n] && !bits[n] {
                    bits[n] = true;
                    next.push_back(n);
                }
            };
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < nx {
                visit(idx + 1);
            }
            if j > 0 {
                visit(idx - nx);
            }
            if j + 1 < ny {
                visit(idx + nx);
            }
            if k > 0 {
                visit(idx - plane);
            }
            if k + 1 < nz {
                visit(idx + plane);
            }
        }
        if next.is_empty() {
            break;
        }
        sweeps += 1;
        frontier = next;
    }
    (out, sweeps)
}

/// Densitometry of the refined mask: the study's final report.
pub fn remeasure(
    vol: &CtVolume,
    result: &RefinementResult,
    params: &DensityParams,
) -> Result<DensityReport> {
    if result.final_mask.is_empty() {
        return Err(Error::invalid("refined mask is empty"));
    }
    analyze(vol, &result.final_mask, params)
}
