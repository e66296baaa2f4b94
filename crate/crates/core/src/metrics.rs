//! Boundary-aware evaluation: mask IoU, boundary F-score at pixel tolerances,
//! and a mask-level boundary IoU that ignores interior-only errors.
//!
//! Contours are the 3x3 Laplacian rule from [`crate::morphology`]; tolerance
//! matching uses Chebyshev distance, implemented by dilating the opposite
//! contour with a (2*tol+1) window so the metric is exactly reproducible by a
//! brute-force distance scan.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{boundary_target, dilate, erode, BinaryMask, KernelSize};

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.height(), gt.width()),
            got: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    Ok(())
}

/// Intersection over union of two masks; 1 when both are empty.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let inter = pred.intersect(gt).count_ones();
    let union = pred.union(gt).count_ones();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Harmonic mean of contour precision and recall at a Chebyshev pixel
/// tolerance. Both contours empty scores 1; exactly one empty scores 0.
pub fn boundary_f_score(pred: &BinaryMask, gt: &BinaryMask, tolerance_px: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    if tolerance_px == 0 {
        return Err(Error::Config("boundary F-score tolerance must be >= 1".into()));
    }
    let pc = boundary_target(pred);
    let gc = boundary_target(gt);
    let np = pc.count_ones();
    let ng = gc.count_ones();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let k = KernelSize::new(2 * tolerance_px + 1).expect("2*tol+1 is odd");
    let precision = pc.intersect(&dilate(&gc, k)).count_ones() as f64 / np as f64;
    let recall = gc.intersect(&dilate(&pc, k)).count_ones() as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// IoU restricted to the bands within Chebyshev distance `d` of each mask's
/// contour: band(m) = m AND NOT erode(m, 2d+1), with the prediction band
/// additionally clipped to the d-neighborhood of the ground-truth contour so
/// that errors strictly deeper than `d` inside the object cannot lower the
/// score. Both bands empty scores 1.
pub fn boundary_iou(pred: &BinaryMask, gt: &BinaryMask, d: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    if d == 0 {
        return Err(Error::Config("boundary IoU band width must be >= 1".into()));
    }
    let k = KernelSize::new(2 * d + 1).expect("2d+1 is odd");
    let band_pred = pred.minus(&erode(pred, k));
    let band_gt = gt.minus(&erode(gt, k));
    if band_pred.is_all_zero() && band_gt.is_all_zero() {
        return Ok(1.0);
    }
    let support = dilate(&boundary_target(gt), k);
    let a = band_pred.intersect(&support);
    let union = a.union(&band_gt).count_ones();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersect(&band_gt).count_ones() as f64 / union as f64)
}

/// Metrics for one prediction/ground-truth pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mask_iou: f64,
    /// Boundary F-score keyed by pixel tolerance.
    pub f_scores: BTreeMap<usize, f64>,
    pub boundary_iou: f64,
}

/// Per-sample metrics plus aggregate means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_mask_iou: f64,
    pub mean_f_scores: BTreeMap<usize, f64>,
    pub mean_boundary_iou: f64,
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    /// Mean boundary F-score at one tolerance, if it was evaluated.
    pub fn mean_f(&self, tolerance_px: usize) -> Option<f64> {
        self.mean_f_scores.get(&tolerance_px).copied()
    }

    /// Flat CSV: one row per sample, aggregate row last.
    pub fn to_csv(&self) -> String {
        let tols: Vec<usize> = self.mean_f_scores.keys().copied().collect();
        let mut out = String::from("sample,mask_iou");
        for t in &tols {
            out.push_str(&format!(",f_{t}px"));
        }
        out.push_str(",boundary_iou\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{}", s.mask_iou));
            for t in &tols {
                out.push_str(&format!(",{}", s.f_scores.get(t).copied().unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(",{}\n", s.boundary_iou));
        }
        out.push_str(&format!("mean,{}", self.mean_mask_iou));
        for t in &tols {
            out.push_str(&format!(",{}", self.mean_f_scores[t]));
        }
        out.push_str(&format!(",{}\n", self.mean_boundary_iou));
        out
    }
}

/// Evaluate one pair at the given tolerances and band width.
pub fn sample_metrics(pred: &BinaryMask, gt: &BinaryMask, tolerances: &[usize], d: usize) -> Result<SampleMetrics> {
    let mut f_scores = BTreeMap::new();
    for &t in tolerances {
        f_scores.insert(t, boundary_f_score(pred, gt, t)?);
    }
    Ok(SampleMetrics {
        mask_iou: mask_iou(pred, gt)?,
        f_scores,
        boundary_iou: boundary_iou(pred, gt, d)?,
    })
}

/// Evaluate many pairs in parallel and aggregate. Sample order is preserved,
/// and aggregation is a fixed-order fold, so the report is deterministic.
pub fn evaluate(pairs: &[(BinaryMask, BinaryMask)], tolerances: &[usize], d: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot evaluate an empty sample set".into()));
    }
    let samples: Vec<SampleMetrics> = pairs
        .par_iter()
        .map(|(pred, gt)| sample_metrics(pred, gt, tolerances, d))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mean_mask_iou = samples.iter().map(|s| s.mask_iou).sum::<f64>() / n;
    let mean_boundary_iou = samples.iter().map(|s| s.boundary_iou).sum::<f64>() / n;
    let mut mean_f_scores = BTreeMap::new();
    for &t in tolerances {
        let m = samples.iter().map(|s| s.f_scores[&t]).sum::<f64>() / n;
        mean_f_scores.insert(t, m);
    }
    Ok(EvalReport { count: samples.len(), mean_mask_iou, mean_f_scores, mean_boundary_iou, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
    }

    fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            dy * dy + dx * dx <= r * r
        })
    }

    // Chebyshev distance from p to the nearest set pixel, by full scan.
    fn cheb_dist(mask: &BinaryMask, py: usize, px: usize) -> Option<usize> {
        let mut best = None;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) {
                    let d = (y as i64 - py as i64).abs().max((x as i64 - px as i64).abs()) as usize;
                    best = Some(best.map_or(d, |b: usize| b.min(d)));
                }
            }
        }
        best
    }

    // Direct stencil contour, written independently of morphology::boundary_target.
    fn contour_oracle(m: &BinaryMask) -> BinaryMask {
        let (h, w) = (m.height(), m.width());
        BinaryMask::from_fn(h, w, |y, x| {
            let mut r = 8 * i32::from(m.get(y, x));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && (ny as usize) < h && nx >= 0 && (nx as usize) < w {
                        r -= i32::from(m.get(ny as usize, nx as usize));
                    }
                }
            }
            r != 0
        })
    }

    fn f_score_oracle(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> f64 {
        let pc = contour_oracle(pred);
        let gc = contour_oracle(gt);
        let (np, ng) = (pc.count_ones(), gc.count_ones());
        if np == 0 && ng == 0 {
            return 1.0;
        }
        if np == 0 || ng == 0 {
            return 0.0;
        }
        let matched = |src: &BinaryMask, dst: &BinaryMask| {
            let mut hits = 0usize;
            for y in 0..src.height() {
                for x in 0..src.width() {
                    if src.get(y, x) {
                        if let Some(d) = cheb_dist(dst, y, x) {
                            if d <= tol {
                                hits += 1;
                            }
                        }
                    }
                }
            }
            hits
        };
        let p = matched(&pc, &gc) as f64 / np as f64;
        let r = matched(&gc, &pc) as f64 / ng as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn boundary_iou_oracle(pred: &BinaryMask, gt: &BinaryMask, d: usize) -> f64 {
        let (h, w) = (gt.height(), gt.width());
        // band(m): mask pixels with an in-image complement pixel within d.
        let band = |m: &BinaryMask| {
            BinaryMask::from_fn(h, w, |y, x| {
                m.get(y, x) && cheb_dist(&m.complement(), y, x).is_some_and(|t| t <= d)
            })
        };
        let bp = band(pred);
        let bg = band(gt);
        if bp.is_all_zero() && bg.is_all_zero() {
            return 1.0;
        }
        let gc = contour_oracle(gt);
        let a = BinaryMask::from_fn(h, w, |y, x| {
            bp.get(y, x) && cheb_dist(&gc, y, x).is_some_and(|t| t <= d)
        });
        let union = a.union(&bg).count_ones();
        if union == 0 {
            return 0.0;
        }
        a.intersect(&bg).count_ones() as f64 / union as f64
    }

    #[test]
    fn mask_iou_basic_cases() {
        let a = rect(8, 8, 1, 5, 1, 5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = rect(8, 8, 5, 8, 5, 8);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::zeros(8, 8);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        // Half coverage with no false positives: |inter| = 8, |union| = 16.
        let gt = rect(8, 8, 2, 6, 2, 6);
        let half = rect(8, 8, 2, 4, 2, 6);
        assert_eq!(mask_iou(&half, &gt).unwrap(), 0.5);
    }

    #[test]
    fn mask_iou_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = BinaryMask::from_fn(9, 9, |_, _| rng.gen_bool(0.4));
            let b = BinaryMask::from_fn(9, 9, |_, _| rng.gen_bool(0.6));
            assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn f_score_perfect_at_every_tolerance() {
        let m = disc(12, 12, 5.5, 5.5, 3.2);
        for t in [1, 2, 3, 5] {
            assert_eq!(boundary_f_score(&m, &m, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn f_score_shifted_square_saturates_at_the_shift() {
        // Contours offset by exactly 2px: perfect at tol 2, imperfect at 1.
        let gt = rect(16, 16, 4, 10, 4, 10);
        let pred = rect(16, 16, 4, 10, 6, 12);
        assert_eq!(boundary_f_score(&pred, &gt, 2).unwrap(), 1.0);
        assert!(boundary_f_score(&pred, &gt, 1).unwrap() < 1.0);
    }

    #[test]
    fn f_score_monotone_in_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = disc(14, 14, rng.gen_range(5.0..8.0), rng.gen_range(5.0..8.0), rng.gen_range(2.0..4.0));
            let b = disc(14, 14, rng.gen_range(5.0..8.0), rng.gen_range(5.0..8.0), rng.gen_range(2.0..4.0));
            let mut prev = 0.0;
            for t in 1..=6 {
                let f = boundary_f_score(&a, &b, t).unwrap();
                assert!(f >= prev - 1e-12);
                prev = f;
            }
        }
    }

    #[test]
    fn f_score_reaches_one_at_diagonal_tolerance() {
        let a = rect(10, 10, 1, 3, 1, 3);
        let b = rect(10, 10, 6, 9, 5, 9);
        assert_eq!(boundary_f_score(&a, &b, 10).unwrap(), 1.0);
    }

    #[test]
    fn f_score_empty_conventions() {
        let e = BinaryMask::zeros(8, 8);
        let m = rect(8, 8, 2, 5, 2, 5);
        assert_eq!(boundary_f_score(&e, &e, 2).unwrap(), 1.0);
        assert_eq!(boundary_f_score(&m, &e, 2).unwrap(), 0.0);
        assert_eq!(boundary_f_score(&e, &m, 2).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_brute_force_oracles_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let h = rng.gen_range(4..=12);
            let w = rng.gen_range(4..=12);
            let da = rng.gen_range(0.2..0.8);
            let db = rng.gen_range(0.2..0.8);
            let a = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(da));
            let b = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(db));
            for t in [1usize, 2, 3] {
                let got = boundary_f_score(&a, &b, t).unwrap();
                let want = f_score_oracle(&a, &b, t);
                assert_eq!(got, want, "f-score tol={t}");
            }
            for d in [1usize, 2] {
                let got = boundary_iou(&a, &b, d).unwrap();
                let want = boundary_iou_oracle(&a, &b, d);
                assert_eq!(got, want, "boundary IoU d={d}");
            }
        }
    }

    #[test]
    fn deep_interior_hole_keeps_boundary_iou_perfect() {
        let gt = disc(16, 16, 7.5, 7.5, 5.5);
        let mut pred = gt.clone();
        pred.set(7, 7, false);
        pred.set(7, 8, false);
        pred.set(8, 7, false);
        pred.set(8, 8, false);
        assert_eq!(boundary_iou(&pred, &gt, 1).unwrap(), 1.0);
        assert!(mask_iou(&pred, &gt).unwrap() < 1.0);
    }

    #[test]
    fn boundary_iou_basic_cases() {
        let a = disc(14, 14, 6.5, 6.5, 4.0);
        assert_eq!(boundary_iou(&a, &a, 2).unwrap(), 1.0);
        let far = rect(14, 14, 0, 2, 11, 14);
        assert_eq!(boundary_iou(&far, &a, 1).unwrap(), 0.0);
        let e = BinaryMask::zeros(14, 14);
        assert_eq!(boundary_iou(&e, &e, 2).unwrap(), 1.0);
    }

    #[test]
    fn metrics_are_translation_invariant() {
        let base_pred = |oy: usize, ox: usize| rect(16, 16, 3 + oy, 8 + oy, 3 + ox, 7 + ox);
        let base_gt = |oy: usize, ox: usize| rect(16, 16, 4 + oy, 9 + oy, 3 + ox, 8 + ox);
        let ref_m = sample_metrics(&base_pred(0, 0), &base_gt(0, 0), &[1, 2, 3], 2).unwrap();
        for (oy, ox) in [(2, 1), (0, 3), (3, 3)] {
            let m = sample_metrics(&base_pred(oy, ox), &base_gt(oy, ox), &[1, 2, 3], 2).unwrap();
            assert_eq!(m.mask_iou, ref_m.mask_iou);
            assert_eq!(m.boundary_iou, ref_m.boundary_iou);
            assert_eq!(m.f_scores, ref_m.f_scores);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let m = rect(8, 8, 2, 5, 2, 5);
        assert!(boundary_f_score(&m, &m, 0).is_err());
        assert!(boundary_iou(&m, &m, 0).is_err());
        let other = BinaryMask::zeros(7, 8);
        assert!(mask_iou(&m, &other).is_err());
    }

    #[test]
    fn evaluate_aggregates_and_serializes() {
        let gt = disc(14, 14, 6.5, 6.5, 4.0);
        let pred = disc(14, 14, 6.5, 7.5, 4.0);
        let pairs = vec![(gt.clone(), gt.clone()), (pred, gt)];
        let report = evaluate(&pairs, &[1, 2], 2).unwrap();
        assert_eq!(report.count, 2);
        assert_eq!(report.samples[0].mask_iou, 1.0);
        let expect = (report.samples[0].mask_iou + report.samples[1].mask_iou) / 2.0;
        assert_eq!(report.mean_mask_iou, expect);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.count, 2);
        assert_eq!(back.mean_f_scores, report.mean_f_scores);
        let csv = report.to_csv();
        assert!(csv.starts_with("sample,mask_iou,f_1px,f_2px,boundary_iou\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!((0.0..=1.0).contains(&report.mean_boundary_iou));
    }
}
