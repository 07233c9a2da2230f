//! Radiodensity histogram, mode splitting and the text report.

use std::fmt::Write as _;

use crate::atlas::LiverShapeType;
use crate::error::{Error, Result};
use crate::matcher::MatchResult;
use crate::volume::{mask_volume_ml, morph, BinaryMask, CtVolume, MorphOp};

pub const HIST_MIN_HU: i32 = -200;
pub const HIST_MAX_HU: i32 = 300;
pub const HIST_BINS: usize = (HIST_MAX_HU - HIST_MIN_HU + 1) as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityParams {
    /// Interior erosion before histogramming.
    pub erosion_mm: f64,
    /// Gaussian smoothing of the histogram, in bins.
    pub smoothing_sigma: f64,
    /// Minimum peak prominence as a fraction of the highest smoothed bin.
    pub prominence: f64,
    pub min_separation_hu: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            erosion_mm: 4.0,
            smoothing_sigma: 3.0,
            prominence: 0.05,
            min_separation_hu: 8.0,
        }
    }
}

/// Counts per 1-HU bin over [-200, 300] plus two overflow bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn empty() -> Self {
        Self {
            counts: vec![0; HIST_BINS],
            below: 0,
            above: 0,
        }
    }

    pub fn add(&mut self, hu: i16) {
        let hu = i32::from(hu);
        if hu < HIST_MIN_HU {
            self.below += 1;
        } else if hu > HIST_MAX_HU {
            self.above += 1;
        } else {
            self.counts[(hu - HIST_MIN_HU) as usize] += 1;
        }
    }

    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.in_range() + self.below + self.above
    }

    pub fn count_at(&self, hu: i32) -> u64 {
        if (HIST_MIN_HU..=HIST_MAX_HU).contains(&hu) {
            self.counts[(hu - HIST_MIN_HU) as usize]
        } else {
            0
        }
    }
}

/// Histogram of the mask interior. The mask is eroded by `erosion_mm` first;
/// if that empties it, the whole mask is used.
pub fn hu_histogram(vol: &CtVolume, mask: &BinaryMask, erosion_mm: f64) -> Result<Histogram> {
    vol.grid().check_same(mask.grid())?;
    if mask.is_empty() {
        return Err(Error::invalid("cannot histogram an empty mask"));
    }
    let eroded = morph(mask, MorphOp::Erode, erosion_mm)?;
    let sample = if eroded.is_empty() { mask } else { &eroded };
    let mut h = Histogram::empty();
    for (&v, &b) in vol.values().iter().zip(sample.bits()) {
        if b {
            h.add(v);
        }
    }
    Ok(h)
}

/// A density mode: its peak and the inclusive HU interval it owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeInterval {
    pub peak_hu: i32,
    pub lo_hu: i32,
    pub hi_hu: i32,
}

fn smooth(counts: &[u64], sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    if sigma <= 0.0 {
        return raw;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let n = raw.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let p = i + t as isize - radius;
                if (0..n).contains(&p) {
                    acc += w * raw[p as usize];
                }
            }
            acc / norm
        })
        .collect()
}

/// Topographic prominence of the peak at `p`.
fn prominence(s: &[f64], p: usize) -> f64 {
    let h = s[p];
    let side = |range: &mut dyn Iterator<Item = usize>| {
        let mut lowest = h;
        for i in range {
            if s[i] > h {
                return lowest;
            }
            lowest = lowest.min(s[i]);
        }
        // No higher ground on this side: the base is the lowest point.
        lowest
    };
    let left = side(&mut (0..p).rev());
    let right = side(&mut (p + 1..s.len()));
    h - left.max(right)
}

/// Split a histogram into density modes. Always returns at least one mode.
pub fn find_modes(hist: &Histogram, params: &DensityParams) -> Vec<ModeInterval> {
    let s = smooth(&hist.counts, params.smoothing_sigma);
    let n = s.len();
    let global = (0..n).fold(0, |best, i| if s[i] > s[best] { i } else { best });
    let gmax = s[global];
    if gmax <= 0.0 {
        return vec![ModeInterval {
            peak_hu: if hist.below >= hist.above { HIST_MIN_HU } else { HIST_MAX_HU },
            lo_hu: HIST_MIN_HU,
            hi_hu: HIST_MAX_HU,
        }];
    }

    // Local maxima; a plateau counts once, at its first bin.
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let rises = i == 0 || s[i - 1] < s[i];
        let falls = j == n - 1 || s[j + 1] < s[i];
        if rises && falls && s[i] > 0.0 {
            peaks.push((i, prominence(&s, i)));
        }
        i = j + 1;
    }
    let floor = params.prominence * gmax;
    peaks.retain(|&(p, prom)| prom >= floor || p == global);
    peaks.sort_by(|a, b| s[b.0].total_cmp(&s[a.0]).then(a.0.cmp(&b.0)));

    let mut kept: Vec<usize> = Vec::new();
    for (p, _) in peaks {
        if kept
            .iter()
            .all(|&q| (p as f64 - q as f64).abs() >= params.min_separation_hu)
        {
            kept.push(p);
        }
    }
    kept.sort_unstable();

    // Interval boundaries: the lowest smoothed bin between neighbors.
    let mut bounds = vec![0usize];
    for w in kept.windows(2) {
        let valley = (w[0]..=w[1]).fold(w[0], |best, i| if s[i] < s[best] { i } else { best });
        bounds.push(valley);
    }
    bounds.push(n - 1);
    kept.iter()
        .enumerate()
        .map(|(m, &p)| {
            let lo = if m == 0 { 0 } else { bounds[m] + 1 };
            ModeInterval {
                peak_hu: p as i32 + HIST_MIN_HU,
                lo_hu: lo as i32 + HIST_MIN_HU,
                hi_hu: bounds[m + 1] as i32 + HIST_MIN_HU,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMode {
    pub mean_hu: f64,
    pub std_hu: f64,
    pub voxel_count: usize,
    pub volume_ml: f64,
    pub fraction: f64,
    pub interval: ModeInterval,
    /// Mean and standard deviation of the interior histogram restricted to
    /// the mode interval; insensitive to boundary outliers.
    pub core_mean_hu: f64,
    pub core_std_hu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    /// Ordered by descending voxel count.
    pub modes: Vec<DensityMode>,
    pub total_volume_ml: f64,
    pub dominant_mode_index: usize,
    pub histogram: Histogram,
}

impl DensityReport {
    pub fn dominant(&self) -> &DensityMode {
        &self.modes[self.dominant_mode_index]
    }
}

fn interval_moments(hist: &Histogram, iv: &ModeInterval) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for hu in iv.lo_hu..=iv.hi_hu {
        let c = hist.count_at(hu) as f64;
        n += c;
        s += c * hu as f64;
        s2 += c * (hu as f64).powi(2);
    }
    if n == 0.0 {
        return (iv.peak_hu as f64, 0.0);
    }
    let mean = s / n;
    (mean, (s2 / n - mean * mean).max(0.0).sqrt())
}

/// Assign every mask voxel to a mode and measure each mode.
pub fn assign_and_measure(
    vol: &CtVolume,
    mask: &BinaryMask,
    modes: &[ModeInterval],
    hist: Histogram,
) -> Result<DensityReport> {
    vol.grid().check_same(mask.grid())?;
    if modes.is_empty() {
        return Err(Error::invalid("at least one density mode is required"));
    }
    let mut acc = vec![(0usize, 0f64, 0f64); modes.len()];
    let mut total = 0usize;
    for (&v, &b) in vol.values().iter().zip(mask.bits()) {
        if !b {
            continue;
        }
        let hu = i32::from(v);
        let m = modes
            .iter()
            .position(|iv| iv.lo_hu <= hu && hu <= iv.hi_hu)
            .unwrap_or_else(|| {
                let dist = |iv: &ModeInterval| (iv.lo_hu - hu).max(hu - iv.hi_hu);
                (0..modes.len())
                    .min_by_key(|&i| dist(&modes[i]))
                    .expect("nonempty")
            });
        let x = f64::from(v);
        acc[m].0 += 1;
        acc[m].1 += x;
        acc[m].2 += x * x;
        total += 1;
    }
    if total == 0 {
        return Err(Error::invalid("cannot measure an empty mask"));
    }
    let voxel_ml = mask.grid().voxel_volume_mm3() / 1000.0;
    let mut out: Vec<DensityMode> = acc
        .iter()
        .zip(modes)
        .filter(|(a, _)| a.0 > 0)
        .map(|(&(n, s, s2), iv)| {
            let mean = s / n as f64;
            let (core_mean, core_std) = interval_moments(&hist, iv);
            DensityMode {
                mean_hu: mean,
                std_hu: (s2 / n as f64 - mean * mean).max(0.0).sqrt(),
                voxel_count: n,
                volume_ml: n as f64 * voxel_ml,
                fraction: n as f64 / total as f64,
                interval: *iv,
                core_mean_hu: core_mean,
                core_std_hu: core_std,
            }
        })
        .collect();
    out.sort_by_key(|m| std::cmp::Reverse(m.voxel_count));
    Ok(DensityReport {
        modes: out,
        total_volume_ml: mask_volume_ml(mask),
        dominant_mode_index: 0,
        histogram: hist,
    })
}

/// Histogram, mode split and measurement in one call.
pub fn analyze(vol: &CtVolume, mask: &BinaryMask, params: &DensityParams) -> Result<DensityReport> {
    let hist = hu_histogram(vol, mask, params.erosion_mm)?;
    let modes = find_modes(&hist, params);
    assign_and_measure(vol, mask, &modes, hist)
}

/// Fixed-point formatting that never prints a negative zero.
pub fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn render_report(report: &DensityReport, m: &MatchResult, shape: LiverShapeType) -> String {
    let mut out = String::new();
    out.push_str("LIVER REPORT\ndetected: yes\n");
    let _ = writeln!(
        out,
        "template: {} type: {} score: {}",
        m.template_id,
        shape,
        fixed(m.score, 3)
    );
    let _ = writeln!(out, "visible_fraction: {}", fixed(m.visible_fraction, 2));
    let _ = writeln!(out, "total_volume_ml: {}", fixed(report.total_volume_ml, 1));
    let _ = writeln!(out, "modes: {}", report.modes.len());
    for (i, mode) in report.modes.iter().enumerate() {
        let _ = writeln!(
            out,
            "mode {}: mean_hu {} std_hu {} volume_ml {} fraction {}",
            i + 1,
            fixed(mode.mean_hu, 1),
            fixed(mode.std_hu, 1),
            fixed(mode.volume_ml, 1),
            fixed(mode.fraction, 2)
        );
    }
    let _ = writeln!(out, "dominant_mode: {}", report.dominant_mode_index + 1);
    out
}

pub fn render_not_detected(best_score: f64) -> String {
    format!(
        "LIVER REPORT\ndetected: no\nbest_score: {}\n",
        fixed(best_score, 3)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn hist_from(values: impl IntoIterator<Item = i16>) -> Histogram {
        let mut h = Histogram::empty();
        for v in values {
            h.add(v);
        }
        h
    }

    fn normal_samples(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<i16> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng).round() as i16).collect()
    }

    #[test]
    fn constant_region_single_bin() {
        let g = VoxelGrid::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g.clone(), 40).unwrap();
        let h = hu_histogram(&v, &BinaryMask::full(g), 4.0).unwrap();
        let nonzero: Vec<usize> = (0..HIST_BINS).filter(|&i| h.counts[i] > 0).collect();
        assert_eq!(nonzero, vec![240]);
        // 4 mm erosion leaves the central 4^3 block (voxels 4..8).
        assert_eq!(h.total(), 64);
    }

    #[test]
    fn erosion_fallback_to_full_mask() {
        let g = VoxelGrid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g.clone(), 10).unwrap();
        let h = hu_histogram(&v, &BinaryMask::full(g), 4.0).unwrap();
        assert_eq!(h.total(), 27);
    }

    #[test]
    fn overflow_bins() {
        let h = hist_from([-500, -500, 10, 400]);
        assert_eq!((h.below, h.above, h.in_range()), (2, 1, 1));
    }

    #[test]
    fn empty_mask_rejected() {
        let g = VoxelGrid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g.clone(), 10).unwrap();
        assert!(hu_histogram(&v, &BinaryMask::empty(g), 4.0).is_err());
    }

    #[test]
    fn unimodal_gaussian() {
        let xs = normal_samples(50.0, 5.0, 100_000, 1);
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
        assert!((mean - 50.0).abs() < 0.1);
        let h = hist_from(xs);
        let argmax = (0..HIST_BINS).max_by_key(|&i| h.counts[i]).unwrap() as i32 + HIST_MIN_HU;
        assert!((argmax - 50).abs() <= 1);
        let modes = find_modes(&h, &DensityParams::default());
        assert_eq!(modes.len(), 1);
        assert!((modes[0].peak_hu - 50).abs() <= 1);
        assert_eq!((modes[0].lo_hu, modes[0].hi_hu), (HIST_MIN_HU, HIST_MAX_HU));
    }

    #[test]
    fn bimodal_mixture() {
        let mut xs = normal_samples(55.0, 3.0, 50_000, 2);
        xs.extend(normal_samples(23.0, 3.0, 50_000, 3));
        let modes = find_modes(&hist_from(xs), &DensityParams::default());
        assert_eq!(modes.len(), 2);
        assert!((modes[0].peak_hu - 23).abs() <= 1);
        assert!((modes[1].peak_hu - 55).abs() <= 1);
        assert_eq!(modes[0].hi_hu + 1, modes[1].lo_hu);
        assert!((30..=48).contains(&modes[0].hi_hu));
    }

    #[test]
    fn close_peaks_merge() {
        let mut xs = normal_samples(50.0, 1.0, 20_000, 4);
        xs.extend(normal_samples(54.0, 1.0, 20_000, 5));
        let p = DensityParams {
            smoothing_sigma: 0.5,
            ..DensityParams::default()
        };
        assert_eq!(find_modes(&hist_from(xs), &p).len(), 1);
    }

    #[test]
    fn prominence_threshold_monotone() {
        let mut xs = normal_samples(60.0, 4.0, 30_000, 6);
        xs.extend(normal_samples(20.0, 4.0, 3_000, 7));
        xs.extend(normal_samples(-40.0, 4.0, 600, 8));
        let h = hist_from(xs);
        let mut last = usize::MAX;
        for prom in [0.0, 0.01, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let p = DensityParams {
                prominence: prom,
                ..DensityParams::default()
            };
            let n = find_modes(&h, &p).len();
            assert!(n <= last && n >= 1);
            last = n;
        }
    }

    #[test]
    fn constant_region_report() {
        let g = VoxelGrid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g.clone(), 37).unwrap();
        let mask = BinaryMask::full(g);
        let r = analyze(&v, &mask, &DensityParams::default()).unwrap();
        assert_eq!(r.modes.len(), 1);
        assert_eq!(r.modes[0].mean_hu, 37.0);
        assert_eq!(r.modes[0].std_hu, 0.0);
        assert_eq!(r.modes[0].fraction, 1.0);
        assert_eq!(r.total_volume_ml, mask_volume_ml(&mask));
    }

    #[test]
    fn outliers_go_to_nearest_mode() {
        let g = VoxelGrid::new([10, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::from_fn(g.clone(), |[i, _, _]| if i == 0 { -600 } else { 40 }).unwrap();
        let modes = [ModeInterval {
            peak_hu: 40,
            lo_hu: 20,
            hi_hu: 60,
        }];
        let h = hist_from(v.values().iter().copied());
        let r = assign_and_measure(&v, &BinaryMask::full(g), &modes, h).unwrap();
        assert_eq!(r.modes[0].voxel_count, 10);
        assert!((r.modes[0].mean_hu + 24.0).abs() < 1e-9);
        assert_eq!(r.modes[0].core_mean_hu, 40.0);
    }

    fn sample_match() -> MatchResult {
        MatchResult {
            template_id: "I-a".into(),
            offset_mm: [0.0; 3],
            scale: 1.0,
            score: 0.8123,
            visible_fraction: 1.0,
        }
    }

    #[test]
    fn single_mode_report_text() {
        let report = DensityReport {
            modes: vec![DensityMode {
                mean_hu: 52.3,
                std_hu: 8.04,
                voxel_count: 1000,
                volume_ml: 1500.0,
                fraction: 1.0,
                interval: ModeInterval {
                    peak_hu: 52,
                    lo_hu: -200,
                    hi_hu: 300,
                },
                core_mean_hu: 52.3,
                core_std_hu: 8.0,
            }],
            total_volume_ml: 1500.0,
            dominant_mode_index: 0,
            histogram: Histogram::empty(),
        };
        let text = render_report(&report, &sample_match(), LiverShapeType::I);
        assert_eq!(
            text,
            "LIVER REPORT\n\
             detected: yes\n\
             template: I-a type: I score: 0.812\n\
             visible_fraction: 1.00\n\
             total_volume_ml: 1500.0\n\
             modes: 1\n\
             mode 1: mean_hu 52.3 std_hu 8.0 volume_ml 1500.0 fraction 1.00\n\
             dominant_mode: 1\n"
        );
        assert_eq!(text.lines().count(), 8);
        assert_eq!(text, render_report(&report, &sample_match(), LiverShapeType::I));
    }

    #[test]
    fn not_detected_text() {
        assert_eq!(
            render_not_detected(-1.0),
            "LIVER REPORT\ndetected: no\nbest_score: -1.000\n"
        );
        assert_eq!(render_not_detected(-0.0001), "LIVER REPORT\ndetected: no\nbest_score: 0.000\n");
        assert_eq!(fixed(-0.04, 1), "0.0");
        assert_eq!(fixed(-0.06, 1), "-0.1");
    }
}
