//! Counting and detection metrics.
//!
//! Counting quality is MAE/RMSE over per-scene counts. Detection quality is
//! average precision with greedy score-ordered matching, a monotone
//! precision envelope and 101-point recall sampling; AP averages the ten IoU
//! thresholds 0.50:0.05:0.95 and AP50 is the value at 0.50.

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tensor::DensityMap;

/// Mean absolute and root-mean-square error between predicted and true
/// counts. RMSE >= MAE always.
pub fn counting_errors(preds: &[f64], gts: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Config(format!(
            "counting_errors needs equal non-empty lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let e = p - g;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Matching verdict at one IoU threshold.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Per detection: the matched ground-truth index, or None for a false
    /// positive.
    pub det_matches: Vec<Option<usize>>,
    /// Per detection: IoU against its match (0 when unmatched).
    pub det_ious: Vec<f64>,
    pub gt_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_count == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_count) as f64
        }
    }
}

/// Greedy matching: detections in descending score order (ties by index)
/// each take the unmatched ground truth with the highest IoU, provided it
/// reaches the threshold. Every detection and ground truth matches at most
/// once.
pub fn match_at_iou(dets: &[(BoundingBox, f64)], gts: &[BoundingBox], thr: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut det_matches = vec![None; dets.len()];
    let mut det_ious = vec![0.0; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = 0;
    for &di in &order {
        let mut best_gt = None;
        let mut best_iou = thr;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let v = iou(&dets[di].0, gt);
            if v > best_iou || (v == best_iou && v >= thr && best_gt.is_none()) {
                best_iou = v;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            gt_matched[gi] = true;
            det_matches[di] = Some(gi);
            det_ious[di] = best_iou;
            tp += 1;
        }
    }
    let fp = dets.len() - tp;
    let fn_count = gts.len() - tp;
    MatchResult { det_matches, det_ious, gt_matched, tp, fp, fn_count }
}

/// Detection AP over a multi-scene set.
#[derive(Debug, Clone)]
pub struct ApResult {
    /// Mean over IoU thresholds 0.50..0.95.
    pub ap: f64,
    /// AP at IoU 0.50.
    pub ap50: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

/// Scored detections and ground truths for one scene.
pub type SceneDetections = (Vec<(BoundingBox, f64)>, Vec<BoundingBox>);

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// 101-point interpolated average precision at the given thresholds.
/// Errors when the scene set has no ground truth at all.
pub fn average_precision(scenes: &[SceneDetections], thresholds: &[f64]) -> Result<ApResult> {
    if scenes.is_empty() {
        return Err(Error::Config("average_precision needs at least one scene".into()));
    }
    let total_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::Config("average precision undefined without ground truth".into()));
    }
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        // Pool detections across scenes with their TP/FP verdicts.
        let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (scene_idx, (dets, gts)) in scenes.iter().enumerate() {
            let m = match_at_iou(dets, gts, thr);
            for (det_idx, (_, score)) in dets.iter().enumerate() {
                pooled.push((*score, scene_idx, det_idx, m.det_matches[det_idx].is_some()));
            }
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pooled.len());
        for &(_, _, _, is_tp) in &pooled {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = tp as f64 / total_gt as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            curve.push((recall, precision));
        }
        // Monotone non-increasing precision envelope from the right.
        let mut envelope = curve.clone();
        let mut best = 0.0f64;
        for point in envelope.iter_mut().rev() {
            best = best.max(point.1);
            point.1 = best;
        }
        // Sample at 101 recall positions.
        let mut acc = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = envelope
                .iter()
                .find(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, prec)| *prec)
                .unwrap_or(0.0);
            acc += p;
        }
        per_threshold.push((thr, acc / 101.0));
    }
    let ap = per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold
        .iter()
        .find(|(t, _)| (*t - 0.5).abs() < 1e-9)
        .map(|(_, v)| *v)
        .unwrap_or(ap);
    Ok(ApResult { ap, ap50, per_threshold })
}

/// Ranking score for a candidate: the peak density value inside the box
/// (pixel-center test), zero if it covers no pixel center.
pub fn detection_score(b: &BoundingBox, g: &DensityMap) -> f64 {
    let (h, w) = g.dims();
    let x_start = (b.x1 as f64 - 0.5).ceil().max(0.0) as usize;
    let x_end = ((b.x2 as f64 - 0.5).floor() as isize).min(w as isize - 1);
    let y_start = (b.y1 as f64 - 0.5).ceil().max(0.0) as usize;
    let y_end = ((b.y2 as f64 - 0.5).floor() as isize).min(h as isize - 1);
    if x_end < x_start as isize || y_end < y_start as isize {
        return 0.0;
    }
    let mut peak = 0.0f64;
    for y in y_start..=y_end as usize {
        for x in x_start..=x_end as usize {
            peak = peak.max(g.get(y, x) as f64);
        }
    }
    peak
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn counting_error_fixtures() {
        let (mae, rmse) = counting_errors(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((mae, rmse), (0.0, 0.0));
        let (mae, rmse) = counting_errors(&[3.0, 5.0], &[1.0, 1.0]).unwrap();
        assert_eq!(mae, 3.0);
        assert!((rmse - 10.0f64.sqrt()).abs() < 1e-12);
        let (mae, rmse) = counting_errors(&[5.0], &[3.0]).unwrap();
        assert_eq!((mae, rmse), (2.0, 2.0));
        assert!(counting_errors(&[], &[]).is_err());
    }

    #[test]
    fn rmse_dominates_mae() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(10);
        for _ in 0..200 {
            let n = 1 + rng.below(20);
            let preds: Vec<f64> = (0..n).map(|_| rng.range_f64(0.0, 50.0)).collect();
            let gts: Vec<f64> = (0..n).map(|_| rng.range_f64(0.0, 50.0)).collect();
            let (mae, rmse) = counting_errors(&preds, &gts).unwrap();
            assert!(rmse >= mae - 1e-12);
        }
    }

    #[test]
    fn perfect_detections_all_match() {
        let gts = vec![bx(0.0, 0.0, 4.0, 4.0), bx(10.0, 0.0, 14.0, 4.0)];
        let dets: Vec<(BoundingBox, f64)> = gts.iter().map(|b| (*b, 0.9)).collect();
        let m = match_at_iou(&dets, &gts, 0.5);
        assert_eq!(m.tp, 2);
        assert_eq!(m.fp, 0);
        assert_eq!(m.fn_count, 0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = vec![bx(0.0, 0.0, 4.0, 4.0)];
        let dets = vec![(gts[0], 0.9), (gts[0], 0.8)];
        let m = match_at_iou(&dets, &gts, 0.5);
        assert_eq!(m.tp, 1);
        assert_eq!(m.fp, 1);
        assert_eq!(m.det_matches[0], Some(0));
        assert_eq!(m.det_matches[1], None);
    }

    #[test]
    fn greedy_matching_agrees_with_exhaustive_assignment_on_fixture() {
        // 3 detections, 2 ground truths with known IoUs; the greedy result
        // must equal the best assignment found by brute force.
        let gts = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0)];
        let dets = vec![
            (bx(1.0, 1.0, 11.0, 11.0), 0.95),
            (bx(19.0, 0.0, 29.0, 10.0), 0.90),
            (bx(2.0, 2.0, 12.0, 12.0), 0.85),
        ];
        let thr = 0.5;
        let m = match_at_iou(&dets, &gts, thr);

        // Brute force: all injective det -> gt assignments.
        let mut best_tp = 0;
        for a0 in [-1isize, 0, 1] {
            for a1 in [-1isize, 0, 1] {
                for a2 in [-1isize, 0, 1] {
                    let assign = [a0, a1, a2];
                    let mut used = [false; 2];
                    let mut ok = true;
                    let mut tp = 0;
                    for (di, &gi) in assign.iter().enumerate() {
                        if gi < 0 {
                            continue;
                        }
                        let gi = gi as usize;
                        if used[gi] || iou(&dets[di].0, &gts[gi]) < thr {
                            ok = false;
                            break;
                        }
                        used[gi] = true;
                        tp += 1;
                    }
                    if ok {
                        best_tp = best_tp.max(tp);
                    }
                }
            }
        }
        assert_eq!(m.tp, best_tp);
        assert_eq!(m.det_matches[0], Some(0));
        assert_eq!(m.det_matches[1], Some(1));
        assert_eq!(m.det_matches[2], None);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = vec![bx(0.0, 0.0, 4.0, 4.0), bx(8.0, 8.0, 12.0, 12.0)];
        let dets: Vec<(BoundingBox, f64)> = gts.iter().map(|b| (*b, 1.0)).collect();
        let scenes = vec![(dets, gts.clone())];
        let r = average_precision(&scenes, &coco_thresholds()).unwrap();
        assert!((r.ap - 1.0).abs() < 1e-12);
        assert!((r.ap50 - 1.0).abs() < 1e-12);

        let scenes = vec![(Vec::new(), gts)];
        let r = average_precision(&scenes, &coco_thresholds()).unwrap();
        assert_eq!(r.ap, 0.0);

        let no_gt: Vec<SceneDetections> = vec![(Vec::new(), Vec::new())];
        assert!(average_precision(&no_gt, &coco_thresholds()).is_err());
    }

    #[test]
    fn ap50_matches_hand_computed_envelope_integral() {
        // Five detections on four ground truths, scores in a known order:
        // verdicts TP TP FP TP FP give the envelope
        //   p = 1.0 for r <= 0.50, p = 0.75 for r <= 0.75, 0 beyond,
        // so AP50 = (51 * 1.0 + 25 * 0.75) / 101.
        let gts = vec![
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 0.0, 30.0, 10.0),
            bx(40.0, 0.0, 50.0, 10.0),
            bx(60.0, 0.0, 70.0, 10.0),
        ];
        let dets = vec![
            (gts[0], 0.9),
            (gts[1], 0.8),
            (bx(100.0, 100.0, 110.0, 110.0), 0.7),
            (gts[2], 0.6),
            (bx(200.0, 200.0, 210.0, 210.0), 0.5),
        ];
        let scenes = vec![(dets, gts)];
        let r = average_precision(&scenes, &[0.5]).unwrap();
        let expect = (51.0 + 25.0 * 0.75) / 101.0;
        assert!((r.ap50 - expect).abs() < 1e-12, "{} vs {expect}", r.ap50);
    }

    #[test]
    fn ap_never_exceeds_ap50() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(31);
        for _ in 0..20 {
            let n_gt = 3 + rng.below(5);
            let gts: Vec<BoundingBox> = (0..n_gt)
                .map(|i| {
                    let x = (i * 20) as f32;
                    bx(x, 0.0, x + 10.0, 10.0)
                })
                .collect();
            let dets: Vec<(BoundingBox, f64)> = gts
                .iter()
                .map(|b| {
                    let jitter = rng.range_f64(-3.0, 3.0) as f32;
                    (
                        bx(b.x1 + jitter, b.y1, b.x2 + jitter, b.y2 + rng.range_f64(-2.0, 2.0) as f32),
                        rng.next_f64(),
                    )
                })
                .collect();
            let scenes = vec![(dets, gts)];
            let r = average_precision(&scenes, &coco_thresholds()).unwrap();
            assert!(r.ap <= r.ap50 + 1e-12);
            assert!((0.0..=1.0).contains(&r.ap));
            assert!((0.0..=1.0).contains(&r.ap50));
        }
    }

    #[test]
    fn detection_score_fixtures() {
        let mut g = DensityMap::zeros(16, 16);
        g.set(5, 5, 0.7);
        g.set(10, 12, 0.3);
        let all = detection_score(&bx(0.0, 0.0, 16.0, 16.0), &g);
        assert_eq!(all, 0.7f32 as f64);
        let empty = detection_score(&bx(0.0, 0.0, 3.0, 3.0), &g);
        assert_eq!(empty, 0.0);
        // Heavier blob scores higher at equal sigma.
        use crate::synth::render_density;
        let g = render_density(32, 32, &[(8.0, 8.0, 1.0), (24.0, 24.0, 0.5)], 2.0);
        let s1 = detection_score(&bx(4.0, 4.0, 12.0, 12.0), &g);
        let s2 = detection_score(&bx(20.0, 20.0, 28.0, 28.0), &g);
        assert!(s1 > s2);
    }
}
