//! Liver shape taxonomy and the template atlas.
//!
//! Six shape types are defined by the size classes of the right and left
//! lobes. Templates are binary masks on a canonical 2 mm isotropic grid.
//! The x axis increases toward the patient's left, so the right lobe sits at
//! low x and the left lobe extends toward high x.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{voxel_span, Ellipsoid};
use crate::volume::{
    connected_components, largest_component, resample_field, BinaryMask, FloatVolume, Region,
    VoxelGrid,
};

pub const CANONICAL_SPACING_MM: f64 = 2.0;

/// Inclusive craniocaudal range of a normal right lobe.
pub const RIGHT_LOBE_NORMAL_MM: (f64, f64) = (135.0, 155.0);

/// Left/right lateral extent ratio bounds of a normal left lobe (inclusive).
/// Calibration constants.
pub const LEFT_LOBE_NORMAL_RATIO: (f64, f64) = (0.5, 0.9);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LobeClass {
    Shortened,
    Normal,
    Elongated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LiverShapeType {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl LiverShapeType {
    pub const ALL: [LiverShapeType; 6] = [
        LiverShapeType::I,
        LiverShapeType::II,
        LiverShapeType::III,
        LiverShapeType::IV,
        LiverShapeType::V,
        LiverShapeType::VI,
    ];

    /// (right lobe, left lobe) size classes.
    pub fn lobes(self) -> (LobeClass, LobeClass) {
        use LobeClass::*;
        match self {
            LiverShapeType::I => (Normal, Normal),
            LiverShapeType::II => (Normal, Elongated),
            LiverShapeType::III => (Normal, Shortened),
            LiverShapeType::IV => (Elongated, Normal),
            LiverShapeType::V => (Elongated, Elongated),
            LiverShapeType::VI => (Elongated, Shortened),
        }
    }

    fn roman(self) -> &'static str {
        match self {
            LiverShapeType::I => "I",
            LiverShapeType::II => "II",
            LiverShapeType::III => "III",
            LiverShapeType::IV => "IV",
            LiverShapeType::V => "V",
            LiverShapeType::VI => "VI",
        }
    }
}

impl fmt::Display for LiverShapeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for LiverShapeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LiverShapeType::ALL
            .into_iter()
            .find(|t| t.roman() == s)
            .ok_or_else(|| Error::invalid(format!("unknown liver shape type {s:?}")))
    }
}

pub fn classify_right_lobe(cc_mm: f64) -> Result<LobeClass> {
    if !(cc_mm > 0.0 && cc_mm.is_finite()) {
        return Err(Error::invalid(format!("craniocaudal size must be > 0, got {cc_mm}")));
    }
    let (lo, hi) = RIGHT_LOBE_NORMAL_MM;
    Ok(if cc_mm < lo {
        LobeClass::Shortened
    } else if cc_mm <= hi {
        LobeClass::Normal
    } else {
        LobeClass::Elongated
    })
}

pub fn classify_left_lobe(left_extent_mm: f64, right_extent_mm: f64) -> Result<LobeClass> {
    if !(left_extent_mm > 0.0 && right_extent_mm > 0.0)
        || !left_extent_mm.is_finite()
        || !right_extent_mm.is_finite()
    {
        return Err(Error::invalid(format!(
            "lobe extents must be > 0, got left {left_extent_mm} right {right_extent_mm}"
        )));
    }
    let r = left_extent_mm / right_extent_mm;
    let (lo, hi) = LEFT_LOBE_NORMAL_RATIO;
    Ok(if r < lo {
        LobeClass::Shortened
    } else if r <= hi {
        LobeClass::Normal
    } else {
        LobeClass::Elongated
    })
}

/// `None` for combinations outside the six-type table (shortened right lobe).
pub fn shape_type(right: LobeClass, left: LobeClass) -> Option<LiverShapeType> {
    LiverShapeType::ALL
        .into_iter()
        .find(|t| t.lobes() == (right, left))
}

/// Craniocaudal extent: number of z-slices holding set voxels times the
/// slice spacing.
pub fn z_extent_mm(mask: &BinaryMask) -> f64 {
    match mask.bounding_box() {
        Some(r) => (r.hi[2] - r.lo[2]) as f64 * mask.grid().spacing()[2],
        None => 0.0,
    }
}

/// Lateral extents `(left, right)` of the two lobes.
///
/// The right lobe is the thick part: starting from the x-column with the
/// largest craniocaudal thickness and moving toward the patient's left, the
/// first column thinner than half of that maximum starts the left lobe. A
/// mask that never thins out has a zero-width left lobe.
pub fn lobe_extents(mask: &BinaryMask) -> Option<(f64, f64)> {
    let bbox = mask.bounding_box()?;
    let [nx, ny, nz] = mask.grid().dims();
    let sx = mask.grid().spacing()[0];
    let mut zmin = vec![usize::MAX; nx];
    let mut zmax = vec![0usize; nx];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask.get(i, j, k) {
                    zmin[i] = zmin[i].min(k);
                    zmax[i] = zmax[i].max(k);
                }
            }
        }
    }
    let thickness: Vec<usize> = (0..nx)
        .map(|i| if zmin[i] == usize::MAX { 0 } else { zmax[i] - zmin[i] + 1 })
        .collect();
    let (peak, &tmax) = thickness
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    let split = (peak..bbox.hi[0])
        .find(|&i| 2 * thickness[i] < tmax)
        .unwrap_or(bbox.hi[0]);
    let right = (split - bbox.lo[0]) as f64 * sx;
    let left = (bbox.hi[0] - split) as f64 * sx;
    Some((left, right))
}

/// Shape type computed from a mask's geometry.
pub fn classify_mask(mask: &BinaryMask) -> Result<Option<LiverShapeType>> {
    let (left, right) =
        lobe_extents(mask).ok_or_else(|| Error::invalid("cannot classify an empty mask"))?;
    let right_class = classify_right_lobe(z_extent_mm(mask))?;
    let left_class = if left == 0.0 {
        LobeClass::Shortened
    } else {
        classify_left_lobe(left, right)?
    };
    Ok(shape_type(right_class, left_class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiverTemplate {
    id: String,
    shape_type: LiverShapeType,
    mask: BinaryMask,
    cc_extent_mm: f64,
}

impl LiverTemplate {
    /// Validates the template invariants: canonical spacing, a single
    /// nonempty 6-connected component, and `cc_extent_mm` within one voxel
    /// of the mask's z-extent.
    pub fn new(id: String, shape_type: LiverShapeType, mask: BinaryMask, cc_extent_mm: f64) -> Result<Self> {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("template id {id:?} must be a non-empty word")));
        }
        if mask
            .grid()
            .spacing()
            .iter()
            .any(|&s| (s - CANONICAL_SPACING_MM).abs() > 1e-9)
        {
            return Err(Error::invalid(format!(
                "template spacing {:?} is not the canonical {CANONICAL_SPACING_MM} mm",
                mask.grid().spacing()
            )));
        }
        let components = connected_components(&mask).components.len();
        if components != 1 {
            return Err(Error::invalid(format!(
                "template mask must be one connected component, found {components}"
            )));
        }
        let extent = z_extent_mm(&mask);
        if (extent - cc_extent_mm).abs() > CANONICAL_SPACING_MM + 1e-9 {
            return Err(Error::invalid(format!(
                "cc_extent_mm {cc_extent_mm} disagrees with mask z-extent {extent}"
            )));
        }
        Ok(Self {
            id,
            shape_type,
            mask,
            cc_extent_mm,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape_type(&self) -> LiverShapeType {
        self.shape_type
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn cc_extent_mm(&self) -> f64 {
        self.cc_extent_mm
    }
}

/// Turn a labeled liver mask into a canonical template: largest component,
/// 2 mm resampling (occupancy >= 0.5), tight crop with a one-voxel margin.
pub fn build_template(
    mask: &BinaryMask,
    id: &str,
    shape: Option<LiverShapeType>,
) -> Result<LiverTemplate> {
    if mask.is_empty() {
        return Err(Error::invalid("cannot build a template from an empty mask"));
    }
    let main = largest_component(mask);
    let occupancy = FloatVolume::new(
        main.grid().clone(),
        main.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let resampled = resample_field(&occupancy, [CANONICAL_SPACING_MM; 3])?;
    let bits = resampled.values.iter().map(|&v| v >= 0.5).collect();
    let canonical = largest_component(&BinaryMask::new(resampled.grid.clone(), bits)?);
    let bbox = canonical
        .bounding_box()
        .ok_or_else(|| Error::invalid("mask vanished when resampled to the canonical grid"))?;
    let cropped = crop_with_margin(&canonical, &bbox, 1);
    let cc = z_extent_mm(&cropped);
    let shape_type = match shape {
        Some(t) => t,
        None => classify_mask(&cropped)?.ok_or_else(|| {
            Error::invalid("mask shape falls outside the six-type taxonomy")
        })?,
    };
    LiverTemplate::new(id.to_string(), shape_type, cropped, cc)
}

/// Crop `region` grown by `margin` voxels on each side, padding with
/// background where the margin leaves the grid.
fn crop_with_margin(mask: &BinaryMask, region: &Region, margin: usize) -> BinaryMask {
    let rd = region.dims();
    let dims = rd.map(|d| d + 2 * margin);
    let s = mask.grid().spacing();
    let lo = mask.grid().position(region.lo);
    let origin = std::array::from_fn(|a| lo[a] - margin as f64 * s[a]);
    let grid = VoxelGrid::new(dims, s, origin).expect("valid crop grid");
    BinaryMask::from_fn(grid, |[i, j, k]| {
        let inside = |v: usize, a: usize| v >= margin && v - margin < rd[a];
        inside(i, 0)
            && inside(j, 1)
            && inside(k, 2)
            && mask.get(
                region.lo[0] + i - margin,
                region.lo[1] + j - margin,
                region.lo[2] + k - margin,
            )
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateAtlas {
    templates: Vec<LiverTemplate>,
}

impl TemplateAtlas {
    pub fn new(templates: Vec<LiverTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Atlas("atlas has no templates".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            if templates[..i].iter().any(|o| o.id == t.id) {
                return Err(Error::Atlas(format!("duplicate template id {:?}", t.id)));
            }
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[LiverTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&LiverTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// The reference atlas holds exactly two templates of each type.
    pub fn validate_reference(&self) -> Result<()> {
        for t in LiverShapeType::ALL {
            let n = self.templates.iter().filter(|x| x.shape_type == t).count();
            if n != 2 {
                return Err(Error::Atlas(format!(
                    "reference atlas needs two templates of type {t}, found {n}"
                )));
            }
        }
        if self.templates.len() != 12 {
            return Err(Error::Atlas(format!(
                "reference atlas needs 12 templates, found {}",
                self.templates.len()
            )));
        }
        Ok(())
    }
}

/// Parametric two-lobe liver: a union of a right-lobe and a left-lobe
/// ellipsoid, in physical millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiverShapeModel {
    pub right: Ellipsoid,
    pub left: Ellipsoid,
}

/// Nominal right-lobe craniocaudal size per class.
fn nominal_cc(class: LobeClass) -> f64 {
    match class {
        LobeClass::Shortened => 120.0,
        LobeClass::Normal => 145.0,
        LobeClass::Elongated => 172.0,
    }
}

/// Nominal left/right lateral extent ratio per class.
fn nominal_left_ratio(class: LobeClass) -> f64 {
    match class {
        LobeClass::Shortened => 0.3,
        LobeClass::Normal => 0.7,
        LobeClass::Elongated => 1.1,
    }
}

impl LiverShapeModel {
    /// Right-lobe lateral and antero-posterior semi-axes (mm).
    const RIGHT_SEMI_X: f64 = 55.0;
    const RIGHT_SEMI_Y: f64 = 75.0;

    /// Build from explicit parameters with the right lobe centered at the
    /// origin. `left_ratio` is the intended left/right lateral extent ratio.
    pub fn from_params(cc_mm: f64, left_ratio: f64, lateral_scale: f64, ap_scale: f64) -> Self {
        let ax = Self::RIGHT_SEMI_X * lateral_scale;
        let ay = Self::RIGHT_SEMI_Y * ap_scale;
        let az = cc_mm / 2.0;
        // The left lobe starts inside the right lobe at x = 0.3 ax; the
        // measured split lands close to x = ax, so its lateral extent is
        // roughly 2 lx - 0.7 ax.
        let lx = (left_ratio * 2.0 * ax + 0.7 * ax) / 2.0;
        let left = Ellipsoid::new(
            [0.3 * ax + lx, -0.25 * ay, 0.175 * cc_mm],
            [lx, 0.7 * ay, 0.22 * cc_mm],
        );
        Self {
            right: Ellipsoid::new([0.0; 3], [ax, ay, az]),
            left,
        }
    }

    pub fn nominal(t: LiverShapeType) -> Self {
        let (r, l) = t.lobes();
        Self::from_params(nominal_cc(r), nominal_left_ratio(l), 1.0, 1.0)
    }

    /// Randomized instance of a type, drawn around its nominal parameters.
    pub fn sample(t: LiverShapeType, rng: &mut impl Rng) -> Self {
        let (r, l) = t.lobes();
        let cc = nominal_cc(r) + rng.random_range(-6.0..6.0);
        let ratio = nominal_left_ratio(l) + rng.random_range(-0.06..0.06);
        Self::from_params(
            cc,
            ratio,
            rng.random_range(0.95..1.05),
            rng.random_range(0.95..1.05),
        )
    }

    /// Highest z of the shape (the dome).
    pub fn top_z(&self) -> f64 {
        self.right.hi()[2].max(self.left.hi()[2])
    }

    pub fn lo(&self) -> [f64; 3] {
        let (a, b) = (self.right.lo(), self.left.lo());
        std::array::from_fn(|i| a[i].min(b[i]))
    }

    pub fn hi(&self) -> [f64; 3] {
        let (a, b) = (self.right.hi(), self.left.hi());
        std::array::from_fn(|i| a[i].max(b[i]))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.right.contains(p) || self.left.contains(p)
    }

    /// Uniform scale about `pivot`, then translate.
    pub fn transformed(&self, pivot: [f64; 3], scale: f64, shift: [f64; 3]) -> Self {
        Self {
            right: self.right.scaled_about(pivot, scale).translated(shift),
            left: self.left.scaled_about(pivot, scale).translated(shift),
        }
    }

    pub fn grown(&self, by: f64) -> Self {
        Self {
            right: self.right.grown(by),
            left: self.left.grown(by),
        }
    }

    /// Rasterize on a fresh grid of the given spacing that encloses the shape.
    pub fn rasterize(&self, spacing: [f64; 3]) -> BinaryMask {
        let lo = self.lo();
        let hi = self.hi();
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / spacing[a]).ceil() as usize + 3);
        let origin = std::array::from_fn(|a| lo[a] - spacing[a]);
        let grid = VoxelGrid::new(dims, spacing, origin).expect("valid raster grid");
        let mut mask = BinaryMask::empty(grid.clone());
        if let Some(r) = voxel_span(&grid, lo, hi) {
            for k in r.lo[2]..r.hi[2] {
                for j in r.lo[1]..r.hi[1] {
                    for i in r.lo[0]..r.hi[0] {
                        if self.contains(grid.position([i, j, k])) {
                            mask.set(i, j, k, true);
                        }
                    }
                }
            }
        }
        mask
    }
}

/// The procedurally generated 12-template reference atlas: two size
/// variants per shape type. Ids are `<type>-a` / `<type>-b`.
pub fn generate_reference_atlas(seed: u64) -> Result<TemplateAtlas> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut templates = Vec::with_capacity(12);
    for t in LiverShapeType::ALL {
        let (r, l) = t.lobes();
        for (suffix, sign) in [("a", -1.0), ("b", 1.0)] {
            let cc = nominal_cc(r) + sign * rng.random_range(4.0..7.0);
            let ratio = nominal_left_ratio(l) + sign * rng.random_range(0.02..0.05);
            let size = 1.0 + sign * rng.random_range(0.02..0.05);
            let model = LiverShapeModel::from_params(cc, ratio, size, size);
            let mask = model.rasterize([CANONICAL_SPACING_MM; 3]);
            templates.push(build_template(&mask, &format!("{t}-{suffix}"), Some(t))?);
        }
    }
    let atlas = TemplateAtlas::new(templates)?;
    atlas.validate_reference()?;
    Ok(atlas)
}
