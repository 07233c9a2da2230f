//! Evaluation statistics.

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// Dice overlap; 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.grid()
        .check_same(b.grid())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

fn check_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: the chance a random positive outscores a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let (pos, neg) = check_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// (sensitivity, specificity).
pub fn sens_spec(detections: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    if detections.len() != labels.len() {
        return Err(Error::invalid("detections and labels differ in length"));
    }
    let (pos, neg) = check_classes(labels)?;
    let tp = detections.iter().zip(labels).filter(|&(&d, &l)| d && l).count();
    let tn = detections.iter().zip(labels).filter(|&(&d, &l)| !d && !l).count();
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityErrorStats {
    /// Root mean square of the signed errors.
    pub std: f64,
    /// Nearest-rank 95th percentile of absolute errors.
    pub p95: f64,
    pub max: f64,
}

pub fn density_error_stats(pred: &[f64], truth: &[f64]) -> Result<DensityErrorStats> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "need equal nonempty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let n = errs.len() as f64;
    let std = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mut abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let rank = ((0.95 * n).ceil() as usize).clamp(1, abs.len());
    Ok(DensityErrorStats {
        std,
        p95: abs[rank - 1],
        max: abs[abs.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;

    fn mask(bits: &[u8]) -> BinaryMask {
        let g = VoxelGrid::new([bits.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        BinaryMask::new(g, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1, 1, 1])).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(dice(&a, &mask(&[1])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(
            roc_auc(&[0.9, 0.6, 0.4, 0.1], &[true, false, true, false]).unwrap(),
            0.75
        );
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn sens_spec_examples() {
        let labels: Vec<bool> = (0..15).map(|i| i < 10).collect();
        let det: Vec<bool> = (0..15).map(|i| i < 9).collect();
        assert_eq!(sens_spec(&det, &labels).unwrap(), (0.9, 1.0));
        assert_eq!(sens_spec(&labels, &labels).unwrap(), (1.0, 1.0));
        let mut labels = vec![true; 481];
        labels.push(false);
        let det: Vec<bool> = (0..482).map(|i| i < 460).collect();
        let (sens, _) = sens_spec(&det, &labels).unwrap();
        assert!((sens - 0.9563).abs() < 1e-4);
        assert_eq!(format!("{:.1}", sens * 100.0), "95.6");
        assert!(sens_spec(&[true], &[true]).is_err());
    }

    #[test]
    fn density_error_examples() {
        let s = density_error_stats(&[10.0, 20.0], &[10.0, 20.0]).unwrap();
        assert_eq!((s.std, s.p95, s.max), (0.0, 0.0, 0.0));
        let s = density_error_stats(&[50.0, 52.0], &[50.0, 50.0]).unwrap();
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((s.p95, s.max), (2.0, 2.0));
        assert!(density_error_stats(&[1.0], &[]).is_err());
    }
}
