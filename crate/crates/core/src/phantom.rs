//! Synthetic CT phantoms with known ground truth.
//!
//! The phantom is an analytic whole body laid out in template millimeters:
//! z runs from the soles (0) to the vertex (~1760), x toward the patient's
//! left and y posterior. A study is a z-window of that body rasterized on a
//! regular grid, so the physical z of a slice equals its template z.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anatomy::{SkeletonTemplate, BONE_HU};
use crate::atlas::{LiverShapeModel, LiverShapeType};
use crate::error::{Error, Result};
use crate::geometry::Ellipsoid;
use crate::volume::{BinaryMask, CtVolume, VoxelGrid, HU_MAX, HU_MIN};

/// Template z of the liver dome.
pub const LIVER_DOME_Z: f64 = 1290.0;
/// Depth below the dome holding 95% of the nominal liver volume, averaged
/// over the six shape types. The thin inferior tip lies below it.
pub const REFERENCE_LIVER_CC: f64 = 132.5;
pub const BODY_HEIGHT_MM: f64 = 1760.0;

const AIR: f64 = -1000.0;
const BONE: f64 = 700.0;
const SUBCUT_FAT: f64 = -100.0;
const MUSCLE: f64 = 45.0;
const VISCERAL_FAT: f64 = -90.0;
const LUNG: f64 = -820.0;
const KIDNEY: f64 = 32.0;
const SPLEEN: f64 = 48.0;
const HEART: f64 = 40.0;
const BRAIN: f64 = 35.0;
const GAS: f64 = -900.0;
const FLUID: f64 = 8.0;
const BOWEL_WALL: f64 = 35.0;
const LIVER_SHELL_FAT: f64 = -100.0;
const VESSEL: f64 = 40.0;
const VESSEL_DENSITY: f64 = 0.6;
const LIVER_SHELL_MM: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    Body,
    ChestCrop,
    Head,
    Limb,
}

impl PhantomKind {
    pub fn has_liver(self) -> bool {
        matches!(self, PhantomKind::Body | PhantomKind::ChestCrop)
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Body => "body",
            PhantomKind::ChestCrop => "chest_crop",
            PhantomKind::Head => "head",
            PhantomKind::Limb => "limb",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(PhantomKind::Body),
            "chest_crop" => Ok(PhantomKind::ChestCrop),
            "head" => Ok(PhantomKind::Head),
            "limb" => Ok(PhantomKind::Limb),
            _ => Err(Error::invalid(format!("unknown phantom kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LesionSize {
    RadiusMm(f64),
    /// Share of the liver volume.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionSpec {
    pub hu: f64,
    pub size: LesionSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub liver_hu: f64,
    pub lesion: Option<LesionSpec>,
    pub noise_sigma_hu: f64,
    pub liver_scale: f64,
    pub shape: LiverShapeType,
    /// Share of the liver kept in view by chest crops.
    pub fov_liver_fraction: f64,
    pub seed: u64,
    pub spacing_mm: [f64; 3],
    /// In-plane field of view (x, y).
    pub fov_mm: [f64; 2],
    /// Fixed slice count instead of the kind's default z-window (top-aligned).
    pub slices: Option<usize>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Body,
            liver_hu: 55.0,
            lesion: None,
            noise_sigma_hu: 10.0,
            liver_scale: 1.0,
            shape: LiverShapeType::I,
            fov_liver_fraction: 1.0,
            seed: 0,
            spacing_mm: [2.0, 2.0, 2.5],
            fov_mm: [360.0, 260.0],
            slices: None,
        }
    }
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(-200.0..=300.0).contains(&self.liver_hu) {
            return bad(format!("liver_hu {} outside [-200, 300]", self.liver_hu));
        }
        if !(self.noise_sigma_hu >= 0.0 && self.noise_sigma_hu.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma_hu));
        }
        if !(0.5..=1.5).contains(&self.liver_scale) {
            return bad(format!("liver_scale {} outside [0.5, 1.5]", self.liver_scale));
        }
        if !(self.fov_liver_fraction > 0.0 && self.fov_liver_fraction <= 1.0) {
            return bad(format!(
                "fov_liver_fraction {} outside (0, 1]",
                self.fov_liver_fraction
            ));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.fov_mm.iter().any(|&f| !(f >= 50.0 && f.is_finite())) {
            return bad(format!("field of view {:?} too small", self.fov_mm));
        }
        if self.slices == Some(0) {
            return bad("slice count must be positive".into());
        }
        if let Some(l) = &self.lesion {
            if !(-200.0..=300.0).contains(&l.hu) {
                return bad(format!("lesion hu {} outside [-200, 300]", l.hu));
            }
            match l.size {
                LesionSize::RadiusMm(r) if !(r > 0.0 && r < 60.0) => {
                    return bad(format!("lesion radius {r} outside (0, 60) mm"));
                }
                LesionSize::Fraction(f) if !(f > 0.0 && f <= 0.5) => {
                    return bad(format!("lesion fraction {f} outside (0, 0.5]"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub liver_mask: BinaryMask,
    /// Parenchymal density the generator painted.
    pub liver_mean_hu: f64,
    pub lesion_mask: Option<BinaryMask>,
    pub label: bool,
    /// Liver voxels on the same lattice before any z-cropping.
    pub uncropped_liver_voxels: usize,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy)]
struct Disk {
    c: [f64; 2],
    r: [f64; 2],
}

impl Disk {
    fn circle(x: f64, y: f64, r: f64) -> Self {
        Self { c: [x, y], r: [r, r] }
    }

    fn ellipse(x: f64, y: f64, a: f64, b: f64) -> Self {
        Self { c: [x, y], r: [a, b] }
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.c[0]) / self.r[0];
        let dy = (y - self.c[1]) / self.r[1];
        dx * dx + dy * dy <= 1.0
    }

    fn shrunk(&self, by: f64) -> Self {
        Self {
            c: self.c,
            r: self.r.map(|r| (r - by).max(1e-3)),
        }
    }
}

/// The analytic body with per-seed anatomical variation.
#[derive(Debug, Clone)]
struct Body {
    bone_scale: f64,
    trunk: [f64; 2],
    liver: Option<LiverShapeModel>,
    lesion: Option<Ellipsoid>,
    liver_hu: f64,
    lesion_hu: f64,
    lungs: [Ellipsoid; 2],
    heart: Ellipsoid,
    kidneys: [Ellipsoid; 2],
    spleen: Ellipsoid,
    stomach: Ellipsoid,
    bowel_z: (f64, f64),
    texture_seed: u64,
}

impl Body {
    fn nominal() -> Self {
        Self::build(None, 0.0, None, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(0), false)
    }

    fn build(
        liver: Option<LiverShapeModel>,
        liver_hu: f64,
        lesion: Option<Ellipsoid>,
        lesion_hu: f64,
        texture_seed: u64,
        rng: &mut ChaCha8Rng,
        jitter: bool,
    ) -> Self {
        let mut j = |amp: f64| if jitter { rng.random_range(-amp..=amp) } else { 0.0 };
        let d = LIVER_DOME_Z;
        let bone_scale = 1.0 + j(0.08);
        let trunk = [165.0 * (1.0 + j(0.04)), 115.0 * (1.0 + j(0.04))];
        let lung_shift = j(5.0);
        let lungs = [-1.0, 1.0].map(|side| {
            Ellipsoid::new(
                [side * 75.0, 5.0, d + 92.5 + lung_shift],
                [60.0, 80.0, 117.5],
            )
        });
        Self {
            bone_scale,
            trunk,
            liver,
            lesion,
            liver_hu,
            lesion_hu,
            lungs,
            heart: Ellipsoid::new([25.0 + j(5.0), -25.0, d + 60.0 + j(5.0)], [50.0, 45.0, 55.0]),
            kidneys: [-1.0, 1.0].map(|side| {
                Ellipsoid::new([side * 75.0, 55.0, d - 150.0], [30.0, 25.0, 55.0])
            }),
            spleen: Ellipsoid::new([105.0, 30.0, d - 70.0 + j(5.0)], [30.0, 40.0, 55.0]),
            stomach: Ellipsoid::new([70.0 + j(5.0), -30.0, d - 60.0], [40.0, 35.0, 50.0]),
            bowel_z: (960.0, d - 60.0),
            texture_seed,
        }
    }

    fn bone(&self, x: f64, y: f64, z: f64) -> bool {
        let s = self.bone_scale;
        let any = |disks: &[Disk]| disks.iter().any(|d| d.contains(x, y));
        match z {
            z if z < 0.0 => false,
            z if z < 70.0 => any(&[
                Disk::ellipse(-90.0, -20.0, 25.0 * s, 55.0 * s),
                Disk::ellipse(90.0, -20.0, 25.0 * s, 55.0 * s),
            ]),
            z if z < 480.0 => any(&[
                Disk::circle(-90.0, -10.0, 13.0 * s),
                Disk::circle(90.0, -10.0, 13.0 * s),
                Disk::circle(-110.0, 10.0, 7.0 * s),
                Disk::circle(110.0, 10.0, 7.0 * s),
            ]),
            z if z < 540.0 => any(&[
                Disk::ellipse(-90.0, 0.0, 40.0 * s, 30.0 * s),
                Disk::ellipse(90.0, 0.0, 40.0 * s, 30.0 * s),
            ]),
            z if z < 880.0 => any(&[
                Disk::circle(-90.0, 0.0, 15.0 * s),
                Disk::circle(90.0, 0.0, 15.0 * s),
            ]),
            z if z < 1040.0 => any(&[
                Disk::ellipse(-95.0, 30.0, 50.0 * s, 18.0 * s),
                Disk::ellipse(95.0, 30.0, 50.0 * s, 18.0 * s),
                Disk::circle(0.0, 80.0, 25.0 * s),
            ]),
            z if z < 1140.0 => any(&[Disk::circle(0.0, 85.0, 22.0 * s)]),
            z if z < 1290.0 => {
                Disk::circle(0.0, 85.0, 19.0 * s).contains(x, y) || self.ribs(x, y, 10, 6.0 * s)
            }
            z if z < 1460.0 => {
                Disk::circle(0.0, 85.0, 14.0 * s).contains(x, y) || self.ribs(x, y, 8, 4.0 * s)
            }
            z if z < 1530.0 => any(&[
                Disk::circle(0.0, 80.0, 14.0 * s),
                Disk::ellipse(-110.0, 40.0, 45.0 * s, 12.0 * s),
                Disk::ellipse(110.0, 40.0, 45.0 * s, 12.0 * s),
                Disk::circle(-155.0, 0.0, 20.0 * s),
                Disk::circle(155.0, 0.0, 20.0 * s),
            ]),
            z if z < 1600.0 => any(&[Disk::circle(0.0, 30.0, 11.0 * s)]),
            z if z <= BODY_HEIGHT_MM => {
                let outer = Ellipsoid::new([0.0, 0.0, 1680.0], [75.0, 95.0, 85.0]);
                let inner = Ellipsoid::new([0.0, 0.0, 1680.0], [68.0, 88.0, 78.0]);
                outer.contains([x, y, z]) && !inner.contains([x, y, z])
            }
            _ => false,
        }
    }

    /// Rib cross-sections spread over the lateral and anterior arc.
    fn ribs(&self, x: f64, y: f64, n: usize, r: f64) -> bool {
        let a = self.trunk[0] - 15.0;
        let b = self.trunk[1] - 15.0;
        (0..n).any(|i| {
            // Angles from posterolateral on one side around the front to the other.
            let t = PI * 0.15 + (PI * 1.7) * i as f64 / (n - 1) as f64;
            let cx = a * (t + PI / 2.0).cos();
            let cy = b * (t + PI / 2.0).sin();
            Disk::circle(cx, cy, r).contains(x, y)
        })
    }

    /// Soft-tissue value, or `None` outside the body.
    fn soft(&self, x: f64, y: f64, z: f64) -> Option<f64> {
        match z {
            z if !(0.0..=BODY_HEIGHT_MM).contains(&z) => None,
            z if z < 880.0 => {
                let (cy, a, b) = if z < 70.0 {
                    (-30.0, 45.0, 100.0)
                } else if z < 480.0 {
                    (0.0, 50.0, 50.0)
                } else if z < 540.0 {
                    (0.0, 55.0, 55.0)
                } else {
                    (0.0, 70.0, 70.0)
                };
                [-90.0, 90.0].iter().find_map(|&cx| {
                    let outer = Disk::ellipse(cx, cy, a, b);
                    if !outer.contains(x, y) {
                        None
                    } else if outer.shrunk(10.0).contains(x, y) {
                        Some(MUSCLE)
                    } else {
                        Some(SUBCUT_FAT)
                    }
                })
            }
            z if z < 1460.0 => self.trunk_soft(x, y, z),
            z if z < 1530.0 => {
                let outer = Disk::ellipse(0.0, 0.0, 178.0, 105.0);
                if !outer.contains(x, y) {
                    None
                } else if outer.shrunk(15.0).contains(x, y) {
                    Some(MUSCLE)
                } else {
                    Some(SUBCUT_FAT)
                }
            }
            z if z < 1600.0 => {
                let outer = Disk::circle(0.0, 20.0, 55.0);
                if !outer.contains(x, y) {
                    None
                } else if outer.shrunk(8.0).contains(x, y) {
                    Some(MUSCLE)
                } else {
                    Some(SUBCUT_FAT)
                }
            }
            _ => {
                let head = Ellipsoid::new([0.0, 0.0, 1680.0], [82.0, 102.0, 92.0]);
                if !head.contains([x, y, z]) {
                    None
                } else if head.grown(-7.0).contains([x, y, z]) {
                    Some(BRAIN)
                } else {
                    Some(MUSCLE)
                }
            }
        }
    }

    fn trunk_soft(&self, x: f64, y: f64, z: f64) -> Option<f64> {
        let outer = Disk::ellipse(0.0, 0.0, self.trunk[0], self.trunk[1]);
        if !outer.contains(x, y) {
            return None;
        }
        let p = [x, y, z];
        if let Some(liver) = &self.liver {
            if liver.contains(p) {
                if self.lesion.is_some_and(|l| l.contains(p)) {
                    return Some(self.lesion_hu);
                }
                return Some(self.liver_hu);
            }
            if liver.grown(LIVER_SHELL_MM).contains(p) {
                return Some(LIVER_SHELL_FAT);
            }
        }
        if !outer.shrunk(15.0).contains(x, y) {
            return Some(SUBCUT_FAT);
        }
        if !outer.shrunk(25.0).contains(x, y) {
            return Some(MUSCLE);
        }
        if self.lungs.iter().any(|l| l.contains(p)) && z >= LIVER_DOME_Z - 25.0 {
            if self.heart.contains(p) {
                return Some(HEART);
            }
            return Some(LUNG);
        }
        if self.heart.contains(p) {
            return Some(HEART);
        }
        if self.stomach.contains(p) {
            // Supine patient: gas rises anteriorly (negative y).
            let gas_level = self.stomach.center[1] - 0.4 * self.stomach.semi[1];
            return Some(if p[1] < gas_level { GAS } else { FLUID });
        }
        if self.spleen.contains(p) {
            return Some(SPLEEN);
        }
        if self.kidneys.iter().any(|k| k.contains(p)) {
            return Some(KIDNEY);
        }
        // Splenic flexure and jejunal loops reach higher on the left.
        let bowel_top = if x > 20.0 { self.bowel_z.1 + 50.0 } else { self.bowel_z.1 };
        if (self.bowel_z.0..bowel_top).contains(&z) {
            return Some(self.bowel(x, y, z));
        }
        Some(self.mesentery(x, y, z))
    }

    /// Visceral fat threaded with small vessels: at most one blob per 10 mm
    /// cell.
    fn mesentery(&self, x: f64, y: f64, z: f64) -> f64 {
        const CELL: f64 = 10.0;
        let c = [x, y, z].map(|v| (v / CELL).floor());
        let key = c
            .iter()
            .fold(self.texture_seed ^ 0xFA7, |h, &v| mix(h ^ (v as i64 as u64)));
        if unit(mix(key ^ 3)) > VESSEL_DENSITY {
            return VISCERAL_FAT;
        }
        let r = 1.5 + 1.5 * unit(mix(key ^ 4));
        let d2: f64 = [x, y, z]
            .iter()
            .zip(&c)
            .enumerate()
            .map(|(a, (p, cell))| {
                let centre = cell * CELL + r + (CELL - 2.0 * r) * unit(mix(key ^ (5 + a as u64)));
                (p - centre) * (p - centre)
            })
            .sum();
        if d2 <= r * r {
            VESSEL
        } else {
            VISCERAL_FAT
        }
    }

    /// Bowel loops: one sphere per 14 mm cell with a random content class.
    fn bowel(&self, x: f64, y: f64, z: f64) -> f64 {
        const CELL: f64 = 14.0;
        let c = [x, y, z].map(|v| (v / CELL).floor());
        let key = c
            .iter()
            .fold(self.texture_seed ^ 0xB0E1, |h, &v| mix(h ^ (v as i64 as u64)));
        let r = 4.5 + 2.0 * unit(mix(key ^ 1));
        let center = c.map(|v| (v + 0.5) * CELL);
        let d2: f64 = [x, y, z]
            .iter()
            .zip(&center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2 > r * r {
            return VISCERAL_FAT;
        }
        match unit(mix(key ^ 2)) {
            u if u < 0.25 => {
                if d2 > (r - 1.5) * (r - 1.5) {
                    BOWEL_WALL
                } else {
                    GAS
                }
            }
            u if u < 0.6 => FLUID,
            _ => BOWEL_WALL,
        }
    }

    fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        if self.bone(x, y, z) {
            return BONE;
        }
        self.soft(x, y, z).unwrap_or(AIR)
    }
}

/// In-plane sample coordinates of a centered field of view.
fn axis_positions(fov: f64, s: f64) -> (usize, f64) {
    let n = (fov / s).round().max(1.0) as usize;
    (n, -(n as f64 - 1.0) * s / 2.0)
}

/// Liver model for a spec: nominal type shape, small per-seed variation,
/// scaled about the dome and placed in the right upper abdomen.
fn place_liver(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> LiverShapeModel {
    let base = LiverShapeModel::nominal(spec.shape);
    let wobble = LiverShapeModel::from_params(
        base.right.semi[2] * 2.0,
        nominal_left_ratio(&base),
        rng.random_range(0.97..1.03),
        rng.random_range(0.97..1.03),
    );
    let top = wobble.top_z();
    let pivot = [0.0, 0.0, top];
    let shift = [
        -70.0 + rng.random_range(-8.0..=8.0),
        rng.random_range(-8.0..=8.0),
        LIVER_DOME_Z - top + rng.random_range(-3.0..=3.0),
    ];
    wobble.transformed(pivot, spec.liver_scale, shift)
}

fn nominal_left_ratio(m: &LiverShapeModel) -> f64 {
    // Inverse of the left-lobe width rule in `LiverShapeModel::from_params`.
    let ax = m.right.semi[0];
    (2.0 * m.left.semi[0] - 0.7 * ax) / (2.0 * ax)
}

/// Generate a phantom study and its ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<(CtVolume, PhantomTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed ^ 0x5EED));
    let liver = spec.kind.has_liver().then(|| place_liver(spec, &mut rng));
    let lesion = match (&liver, &spec.lesion) {
        (Some(l), Some(les)) => {
            let r = match les.size {
                LesionSize::RadiusMm(r) => r,
                LesionSize::Fraction(f) => {
                    let v = l.right.volume_mm3() + l.left.volume_mm3() * 0.8;
                    (f * v * 3.0 / (4.0 * PI)).cbrt()
                }
            };
            Some(Ellipsoid::new(l.right.center, [r; 3]))
        }
        _ => None,
    };
    let lesion_hu = spec.lesion.map_or(0.0, |l| l.hu);
    let body = Body::build(
        liver,
        spec.liver_hu,
        lesion,
        lesion_hu,
        mix(spec.seed ^ 0x7E7),
        &mut rng,
        true,
    );

    let [sx, sy, sz] = spec.spacing_mm;
    let (nx, x0) = axis_positions(spec.fov_mm[0], sx);
    let (ny, y0) = axis_positions(spec.fov_mm[1], sy);
    let xs: Vec<f64> = (0..nx).map(|i| x0 + i as f64 * sx).collect();
    let ys: Vec<f64> = (0..ny).map(|j| y0 + j as f64 * sy).collect();

    let liver_slice_counts = |zs: &[f64]| -> Vec<usize> {
        let Some(l) = &body.liver else {
            return vec![0; zs.len()];
        };
        zs.iter()
            .map(|&z| {
                ys.iter()
                    .map(|&y| xs.iter().filter(|&&x| l.contains([x, y, z])).count())
                    .sum()
            })
            .collect()
    };

    let jz = |rng: &mut ChaCha8Rng| rng.random_range(-20.0..=20.0);
    let d = LIVER_DOME_Z;
    // Top slice position and slice count, top-aligned.
    let (z_top, nz, uncropped) = match spec.kind {
        PhantomKind::Body => {
            let top = d + 60.0 + jz(&mut rng);
            let bottom = d - 270.0 + jz(&mut rng);
            (top, ((top - bottom) / sz).round() as usize + 1, None)
        }
        PhantomKind::Head => {
            let bottom = 1540.0 + jz(&mut rng);
            let top = 1765.0;
            (top, ((top - bottom) / sz).round() as usize + 1, None)
        }
        PhantomKind::Limb => {
            let (bottom, top) = if rng.random_bool(0.5) {
                (100.0, 440.0)
            } else {
                (560.0, 870.0)
            };
            let shift = jz(&mut rng);
            (top + shift, ((top - bottom) / sz).round() as usize + 1, None)
        }
        PhantomKind::ChestCrop => {
            let top = 1540.0 + jz(&mut rng);
            let lowest = d - 320.0;
            let n_all = ((top - lowest) / sz).floor() as usize + 1;
            let zs: Vec<f64> = (0..n_all).map(|m| top - m as f64 * sz).collect();
            let counts = liver_slice_counts(&zs);
            let total: usize = counts.iter().sum();
            let target = spec.fov_liver_fraction * total as f64;
            let mut acc = 0usize;
            let mut best = (f64::INFINITY, n_all);
            for (m, c) in counts.iter().enumerate() {
                acc += c;
                let err = (acc as f64 - target).abs();
                if err < best.0 {
                    best = (err, m + 1);
                }
            }
            if spec.fov_liver_fraction >= 1.0 {
                // Whole liver plus a margin below it.
                let last = counts.iter().rposition(|&c| c > 0).unwrap_or(0);
                best.1 = (last + 1 + (20.0 / sz).ceil() as usize).min(n_all);
            }
            (top, best.1, Some(total))
        }
    };
    let nz = spec.slices.unwrap_or(nz);
    let z0 = z_top - (nz as f64 - 1.0) * sz;
    let grid = VoxelGrid::new([nx, ny, nz], spec.spacing_mm, [x0, y0, z0])?;

    let noise = Normal::new(0.0, spec.noise_sigma_hu.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed ^ 0x4015E));
    let plane = nx * ny;
    let mut values = Vec::with_capacity(grid.len());
    let mut liver_bits = Vec::with_capacity(grid.len());
    let mut lesion_bits = Vec::with_capacity(if lesion.is_some() { grid.len() } else { 0 });
    for k in 0..nz {
        let z = z0 + k as f64 * sz;
        for &y in &ys {
            for &x in &xs {
                let mut v = body.value(x, y, z);
                if spec.noise_sigma_hu > 0.0 {
                    v += noise.sample(&mut noise_rng);
                }
                values.push(v.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16);
                let p = [x, y, z];
                let in_liver = body.liver.is_some_and(|l| l.contains(p))
                    && body.soft(x, y, z).is_some()
                    && !body.bone(x, y, z);
                liver_bits.push(in_liver);
                if let Some(les) = &lesion {
                    lesion_bits.push(in_liver && les.contains(p));
                }
            }
        }
        debug_assert_eq!(values.len(), (k + 1) * plane);
    }
    let vol = CtVolume::new(grid.clone(), values)?;
    let liver_mask = BinaryMask::new(grid.clone(), liver_bits)?;
    let uncropped_liver_voxels = uncropped.unwrap_or_else(|| liver_mask.count());
    let lesion_mask = if lesion.is_some() {
        Some(BinaryMask::new(grid, lesion_bits)?)
    } else {
        None
    };
    Ok((
        vol,
        PhantomTruth {
            label: spec.kind.has_liver() && !liver_mask.is_empty(),
            liver_mask,
            liver_mean_hu: spec.liver_hu,
            lesion_mask,
            uncropped_liver_voxels,
        },
    ))
}

/// Skeleton template of the nominal phantom body: bone area per millimeter
/// from the soles upward, with the reference liver interval.
pub fn skeleton_template() -> SkeletonTemplate {
    let body = Body::nominal();
    let s = 2.0;
    let (nx, x0) = axis_positions(360.0, s);
    let (ny, y0) = axis_positions(260.0, s);
    let profile: Vec<f64> = (0..=BODY_HEIGHT_MM as usize)
        .map(|z| {
            let z = z as f64;
            let mut n = 0usize;
            for j in 0..ny {
                let y = y0 + j as f64 * s;
                for i in 0..nx {
                    if body.bone(x0 + i as f64 * s, y, z) {
                        n += 1;
                    }
                }
            }
            n as f64 * s * s
        })
        .collect();
    let _ = BONE_HU;
    SkeletonTemplate::new(
        profile,
        (LIVER_DOME_Z - REFERENCE_LIVER_CC, LIVER_DOME_Z),
    )
    .expect("nominal skeleton is valid")
}

/// One corpus manifest line: `id kind liver_present expected_mean_hu path`.
pub fn manifest_line(id: &str, spec: &PhantomSpec, truth: &PhantomTruth, path: &str) -> String {
    let mean = if truth.label {
        format!("{:.1}", truth.liver_mean_hu)
    } else {
        "-".to_string()
    };
    format!(
        "{id} {} {} {mean} {path}",
        spec.kind,
        if truth.label { "yes" } else { "no" }
    )
}

/// The standard detection corpus: 60 positives (body and chest crops) and
/// 40 negatives (heads and limbs), all derived from `seed`.
pub fn standard_corpus(seed: u64) -> Vec<(String, PhantomSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xC0_4905));
    let mut out = Vec::with_capacity(100);
    for i in 0..60 {
        let kind = if i % 2 == 0 {
            PhantomKind::Body
        } else {
            PhantomKind::ChestCrop
        };
        let spec = PhantomSpec {
            kind,
            liver_hu: rng.random_range(-5.0..=73.0),
            noise_sigma_hu: [5.0, 10.0, 15.0][i % 3],
            liver_scale: rng.random_range(0.85..=1.15),
            shape: LiverShapeType::ALL[(i / 2) % 6],
            fov_liver_fraction: if kind == PhantomKind::ChestCrop {
                rng.random_range(0.55..=0.9)
            } else {
                1.0
            },
            seed: mix(seed.wrapping_add(i as u64)),
            ..PhantomSpec::default()
        };
        out.push((format!("pos{i:02}"), spec));
    }
    for i in 0..40 {
        let kind = if i % 2 == 0 {
            PhantomKind::Head
        } else {
            PhantomKind::Limb
        };
        let spec = PhantomSpec {
            kind,
            noise_sigma_hu: [5.0, 10.0, 15.0][i % 3],
            seed: mix(seed.wrapping_add(1000 + i as u64)),
            ..PhantomSpec::default()
        };
        out.push((format!("neg{i:02}"), spec));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in [
            PhantomKind::Body,
            PhantomKind::ChestCrop,
            PhantomKind::Head,
            PhantomKind::Limb,
        ] {
            assert_eq!(k.to_string().parse::<PhantomKind>().unwrap(), k);
        }
        assert!("torso".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = PhantomSpec::default();
        s.liver_hu = 400.0;
        assert!(generate(&s).is_err());
        let mut s = PhantomSpec::default();
        s.noise_sigma_hu = -1.0;
        assert!(generate(&s).is_err());
        let mut s = PhantomSpec::default();
        s.fov_liver_fraction = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn skeleton_has_structure() {
        let t = skeleton_template();
        let p = t.bone_profile();
        assert_eq!(p.len(), 1761);
        let mean = |a: usize, b: usize| p[a..b].iter().sum::<f64>() / (b - a) as f64;
        // Pelvis outweighs the lumbar spine, ribs outweigh the lung slab.
        assert!(mean(900, 1030) > 2.0 * mean(1050, 1130));
        assert!(mean(1150, 1280) > 1.5 * mean(1300, 1450));
        assert_eq!(t.liver_interval(), (1157.5, 1290.0));
    }

    #[test]
    fn negatives_have_no_liver() {
        for kind in [PhantomKind::Head, PhantomKind::Limb] {
            let (vol, truth) = generate(&PhantomSpec::new(kind, 3)).unwrap();
            assert!(!truth.label);
            assert!(truth.liver_mask.is_empty());
            assert!(vol.values().iter().any(|&v| v >= BONE_HU));
        }
    }
}
