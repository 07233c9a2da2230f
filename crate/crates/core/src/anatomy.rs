//! Anatomical gating: place the scan on a whole-body skeleton template by
//! correlating craniocaudal bone-area profiles, and decide whether the liver
//! can be in the field of view.
//!
//! Convention: volume z increases from feet to head. Template coordinates
//! are millimeters from the soles of the feet.

use crate::error::{Error, Result};
use crate::volume::CtVolume;

/// Voxels at or above this value count as bone.
pub const BONE_HU: i16 = 200;
/// Smallest profile overlap considered when sliding against the template.
pub const MIN_PROFILE_OVERLAP_MM: usize = 30;
/// Correlation needed before the anatomical placement is trusted.
pub const GATE_MIN_SCORE: f64 = 0.5;
/// Default fraction of the template liver interval that must be in view.
pub const DEFAULT_MIN_OVERLAP: f64 = 0.4;

/// Bone cross-sectional area (mm²) per craniocaudal millimeter of a whole
/// adult skeleton, with the z-interval occupied by the liver.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    bone_profile: Vec<f64>,
    liver_interval: (f64, f64),
}

impl SkeletonTemplate {
    pub fn new(bone_profile: Vec<f64>, liver_interval: (f64, f64)) -> Result<Self> {
        if bone_profile.is_empty() {
            return Err(Error::invalid("skeleton profile is empty"));
        }
        if bone_profile.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::invalid("skeleton areas must be finite and >= 0"));
        }
        let (lo, hi) = liver_interval;
        if !(0.0 <= lo && lo < hi && hi <= bone_profile.len() as f64) {
            return Err(Error::invalid(format!(
                "liver interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= {}",
                bone_profile.len()
            )));
        }
        Ok(Self {
            bone_profile,
            liver_interval,
        })
    }

    pub fn bone_profile(&self) -> &[f64] {
        &self.bone_profile
    }

    pub fn liver_interval(&self) -> (f64, f64) {
        self.liver_interval
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnatomyMatch {
    /// Template z of the volume's first slice.
    pub z_offset_mm: f64,
    pub score: f64,
    pub liver_overlap_fraction: f64,
    /// Length of the volume's 1 mm profile.
    pub profile_len_mm: usize,
    /// The volume contains no bone at all.
    pub no_bone: bool,
    liver_interval: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateDecision {
    /// Expected liver z-range in mm from the volume's first slice center.
    Present { z_range_mm: (f64, f64) },
    Absent,
}

/// Per-slice bone area, linearly resampled onto a 1 mm z-grid starting at the
/// first slice.
pub fn bone_profile(vol: &CtVolume) -> Vec<f64> {
    let [nx, ny, nz] = vol.grid().dims();
    let [sx, sy, sz] = vol.grid().spacing();
    let plane = nx * ny;
    let slice_area: Vec<f64> = vol
        .values()
        .chunks(plane)
        .map(|s| s.iter().filter(|&&v| v >= BONE_HU).count() as f64 * sx * sy)
        .collect();
    debug_assert_eq!(slice_area.len(), nz);
    let len = ((nz - 1) as f64 * sz + 1e-9).floor() as usize + 1;
    (0..len)
        .map(|m| {
            let u = (m as f64 / sz).min((nz - 1) as f64);
            let k = u.floor() as usize;
            let w = u - k as f64;
            if k + 1 < nz {
                slice_area[k] * (1.0 - w) + slice_area[k + 1] * w
            } else {
                slice_area[k]
            }
        })
        .collect()
}

pub fn locate_anatomy(vol: &CtVolume, tmpl: &SkeletonTemplate) -> AnatomyMatch {
    locate_profile(&bone_profile(vol), tmpl)
}

/// Slide `profile` along the template and return the offset with the highest
/// normalized cross-correlation. The template is taken as zero (no bone)
/// beyond its ends.
pub fn locate_profile(profile: &[f64], tmpl: &SkeletonTemplate) -> AnatomyMatch {
    let lp = profile.len();
    let t = &tmpl.bone_profile;
    let lt = t.len() as i64;
    let mean = profile.iter().sum::<f64>() / lp.max(1) as f64;
    let centered: Vec<f64> = profile.iter().map(|v| v - mean).collect();
    let ss_p: f64 = centered.iter().map(|v| v * v).sum();
    let scale = profile.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let no_bone = AnatomyMatch {
        z_offset_mm: 0.0,
        score: 0.0,
        liver_overlap_fraction: 0.0,
        profile_len_mm: lp,
        no_bone: true,
        liver_interval: tmpl.liver_interval,
    };
    if lp == 0 || ss_p <= 1e-12 * scale * scale * lp as f64 || scale == 0.0 {
        return no_bone;
    }

    let min_overlap = MIN_PROFILE_OVERLAP_MM.min(lp).min(t.len()) as i64;
    let lp_i = lp as i64;
    let mut best: Option<(i64, f64)> = None;
    for o in -(lp_i - min_overlap)..=(lt - min_overlap) {
        let lo = o.max(0);
        let hi = (o + lp_i).min(lt);
        if hi - lo < min_overlap {
            continue;
        }
        let mut st = 0.0;
        let mut stt = 0.0;
        let mut spt = 0.0;
        for z in lo..hi {
            let tv = t[z as usize];
            st += tv;
            stt += tv * tv;
            spt += centered[(z - o) as usize] * tv;
        }
        let var_t = stt - st * st / lp as f64;
        if var_t <= 1e-12 * stt.max(1e-300) {
            continue;
        }
        let score = (spt / (ss_p * var_t).sqrt()).clamp(-1.0, 1.0);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((o, score));
        }
    }
    let Some((o, score)) = best else {
        return no_bone;
    };
    let (llo, lhi) = tmpl.liver_interval;
    let covered = (lhi.min((o + lp_i - 1) as f64) - llo.max(o as f64)).max(0.0);
    AnatomyMatch {
        z_offset_mm: o as f64,
        score,
        liver_overlap_fraction: (covered / (lhi - llo)).clamp(0.0, 1.0),
        profile_len_mm: lp,
        no_bone: false,
        liver_interval: tmpl.liver_interval,
    }
}

/// Present when the placement is trustworthy and enough of the template
/// liver interval lies inside the scan.
pub fn gate_liver(m: &AnatomyMatch, min_overlap: f64) -> Result<GateDecision> {
    if !(min_overlap > 0.0 && min_overlap <= 1.0) {
        return Err(Error::invalid(format!(
            "min_overlap must be in (0, 1], got {min_overlap}"
        )));
    }
    if m.no_bone || m.score < GATE_MIN_SCORE || m.liver_overlap_fraction < min_overlap {
        return Ok(GateDecision::Absent);
    }
    let last = m.profile_len_mm.saturating_sub(1) as f64;
    let (lo, hi) = m.liver_interval;
    let z_lo = (lo - m.z_offset_mm).clamp(0.0, last);
    let z_hi = (hi - m.z_offset_mm).clamp(0.0, last);
    Ok(GateDecision::Present {
        z_range_mm: (z_lo, z_hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;
    use rand::{Rng, SeedableRng};

    /// A bumpy synthetic skeleton profile.
    fn template() -> SkeletonTemplate {
        let profile: Vec<f64> = (0..1200)
            .map(|z| {
                let z = z as f64;
                500.0
                    + 300.0 * (z / 37.0).sin()
                    + 200.0 * (z / 91.0).cos()
                    + if (600.0..700.0).contains(&z) { 900.0 } else { 0.0 }
            })
            .collect();
        SkeletonTemplate::new(profile, (500.0, 650.0)).unwrap()
    }

    fn constructed(o: i64, len: usize, t: &SkeletonTemplate) -> AnatomyMatch {
        let (lo, hi) = t.liver_interval();
        let covered = (hi.min((o + len as i64 - 1) as f64) - lo.max(o as f64)).max(0.0);
        AnatomyMatch {
            z_offset_mm: o as f64,
            score: 0.9,
            liver_overlap_fraction: covered / (hi - lo),
            profile_len_mm: len,
            no_bone: false,
            liver_interval: t.liver_interval(),
        }
    }

    #[test]
    fn template_validation() {
        assert!(SkeletonTemplate::new(vec![], (0.0, 1.0)).is_err());
        assert!(SkeletonTemplate::new(vec![1.0; 10], (5.0, 5.0)).is_err());
        assert!(SkeletonTemplate::new(vec![1.0; 10], (0.0, 11.0)).is_err());
        assert!(SkeletonTemplate::new(vec![-1.0; 10], (0.0, 1.0)).is_err());
    }

    #[test]
    fn air_volume_has_zero_profile_and_no_bone() {
        let g = VoxelGrid::new([4, 4, 11], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g, -1000).unwrap();
        let p = bone_profile(&v);
        assert_eq!(p.len(), 26);
        assert!(p.iter().all(|&a| a == 0.0));
        let m = locate_anatomy(&v, &template());
        assert!(m.no_bone);
        assert_eq!(m.score, 0.0);
        assert_eq!(gate_liver(&m, 0.4).unwrap(), GateDecision::Absent);
    }

    #[test]
    fn crop_of_template_is_found() {
        let t = template();
        let crop = t.bone_profile()[400..700].to_vec();
        let m = locate_profile(&crop, &t);
        assert!((m.z_offset_mm - 400.0).abs() <= 1.0);
        assert!(m.score >= 0.99);
    }

    #[test]
    fn amplitude_scaling_keeps_offset() {
        let t = template();
        let crop: Vec<f64> = t.bone_profile()[250..520].to_vec();
        let scaled: Vec<f64> = crop.iter().map(|v| 2.0 * v + 17.0).collect();
        let a = locate_profile(&crop, &t);
        let b = locate_profile(&scaled, &t);
        assert_eq!(a.z_offset_mm, b.z_offset_mm);
        assert!((a.score - b.score).abs() < 1e-9);
    }

    #[test]
    fn noise_profile_scores_low() {
        let t = template();
        for seed in 0..100 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1000.0)).collect();
            let m = locate_profile(&noise, &t);
            assert!(m.score < 0.3, "seed {seed}: {}", m.score);
        }
    }

    #[test]
    fn head_region_is_absent() {
        let t = template();
        let m = constructed(900, 250, &t);
        assert_eq!(m.liver_overlap_fraction, 0.0);
        assert_eq!(gate_liver(&m, 0.4).unwrap(), GateDecision::Absent);
    }

    #[test]
    fn abdominal_region_is_present_with_full_overlap() {
        let t = template();
        let m = constructed(450, 300, &t);
        assert_eq!(m.liver_overlap_fraction, 1.0);
        assert_eq!(
            gate_liver(&m, 0.4).unwrap(),
            GateDecision::Present {
                z_range_mm: (50.0, 200.0)
            }
        );
    }

    #[test]
    fn partial_overlap_respects_threshold() {
        let t = template();
        // Covers template z 590..=889: 60 of the 150 mm liver interval.
        let m = constructed(590, 300, &t);
        assert!((m.liver_overlap_fraction - 0.4).abs() < 1e-12);
        assert!(matches!(gate_liver(&m, 0.4).unwrap(), GateDecision::Present { .. }));
        assert_eq!(gate_liver(&m, 0.5).unwrap(), GateDecision::Absent);
    }

    #[test]
    fn low_score_is_absent() {
        let t = template();
        let mut m = constructed(450, 300, &t);
        m.score = 0.49;
        assert_eq!(gate_liver(&m, 0.4).unwrap(), GateDecision::Absent);
        assert!(gate_liver(&m, 0.0).is_err());
    }
}
