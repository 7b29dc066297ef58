//! Localization and detection metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::predict::Prediction;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// IoU threshold separating acceptable from poor localization.
pub const IOU_HALF: f64 = 0.5;

/// One-to-one assignment of predictions to ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatch {
    /// IoU of each ground truth with its prediction, 0 when unmatched.
    pub ious: Vec<f64>,
    /// Prediction index assigned to each ground truth.
    pub pred: Vec<Option<usize>>,
}

/// Greedy assignment by descending IoU (ties: lower ground-truth index, then
/// lower prediction index). Pairs with zero overlap are never assigned.
pub fn match_for_metrics<T: Scalar>(preds: &[BBox<T>], gts: &[BBox<T>]) -> Result<MetricMatch> {
    let mut pairs = Vec::with_capacity(preds.len() * gts.len());
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let v = p.iou(g)?.to_f64_lossy();
            if v > 0.0 {
                pairs.push((v, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = MetricMatch {
        ious: vec![0.0; gts.len()],
        pred: vec![None; gts.len()],
    };
    let mut used = vec![false; preds.len()];
    for (v, gi, pi) in pairs {
        if out.pred[gi].is_none() && !used[pi] {
            out.ious[gi] = v;
            out.pred[gi] = Some(pi);
            used[pi] = true;
        }
    }
    Ok(out)
}

/// Area under the all-point interpolated precision/recall curve of ranked
/// true/false-positive flags.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Empty("average precision needs ground truths"));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// Rank every prediction of every image by confidence (ties by image, then
/// position) and flag it a true positive when it reaches IoU 0.5 with a
/// not yet claimed ground truth of its image, claiming the best such box.
pub fn ranked_flags<T: Scalar>(preds: &[Vec<Prediction<T>>], gts: &[Vec<BBox<T>>]) -> Result<Vec<bool>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "ap50",
            format!("{} prediction lists for {} images", preds.len(), gts.len()),
        ));
    }
    let mut ranked: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(j, p)| (p.confidence.to_f64_lossy(), i, j)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for (_, i, j) in ranked {
        let p = &preds[i][j].bbox;
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gts[i].iter().enumerate() {
            if claimed[i][k] {
                continue;
            }
            let v = p.iou(g)?.to_f64_lossy();
            if v >= IOU_HALF && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, k));
            }
        }
        if let Some((_, k)) = best {
            claimed[i][k] = true;
        }
        flags.push(best.is_some());
    }
    Ok(flags)
}

/// Average precision at IoU 0.5 over a whole dataset.
pub fn ap50<T: Scalar>(preds: &[Vec<Prediction<T>>], gts: &[Vec<BBox<T>>]) -> Result<f64> {
    let flags = ranked_flags(preds, gts)?;
    average_precision(&flags, gts.iter().map(Vec::len).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    pub n_rois: usize,
    pub avg_iou: f64,
    pub avg_confidence: f64,
    pub min_iou: f64,
    pub min_confidence: f64,
    pub n_below_half: usize,
    pub ap50: f64,
    /// IoU of every ground-truth ROI, in dataset order.
    pub roi_ious: Vec<f64>,
}

/// Dataset-level report: per-ROI IoUs from [`match_for_metrics`], confidence
/// statistics over every emitted prediction, and AP₅₀.
pub fn report<T: Scalar>(preds: &[Vec<Prediction<T>>], gts: &[Vec<BBox<T>>]) -> Result<MetricsReport> {
    if gts.is_empty() {
        return Err(Error::Empty("metrics report over zero images"));
    }
    let n_rois: usize = gts.iter().map(Vec::len).sum();
    if n_rois == 0 {
        return Err(Error::Empty("metrics report over zero ROIs"));
    }
    let ap = ap50(preds, gts)?;
    let mut roi_ious = Vec::with_capacity(n_rois);
    for (p, g) in preds.iter().zip(gts) {
        let boxes: Vec<BBox<T>> = p.iter().map(|q| q.bbox.clone()).collect();
        roi_ious.extend(match_for_metrics(&boxes, g)?.ious);
    }
    let confs: Vec<f64> = preds.iter().flatten().map(|p| p.confidence.to_f64_lossy()).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MetricsReport {
        n_images: gts.len(),
        n_rois,
        avg_iou: mean(&roi_ious),
        avg_confidence: mean(&confs),
        min_iou: min(&roi_ious),
        min_confidence: if confs.is_empty() { 0.0 } else { min(&confs) },
        n_below_half: roi_ious.iter().filter(|&&v| v < IOU_HALF).count(),
        ap50: ap,
        roi_ious,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Plain-text table, one row per named report, in the column order
/// dataset | images | ROIs | avg IoU | avg conf | min IoU | IoU<0.5 | AP50.
pub fn report_table(rows: &[(&str, &MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$}  {:>6}  {:>6}  {:>7}  {:>8}  {:>7}  {:>7}  {:>6}",
        "dataset", "images", "rois", "avg_iou", "avg_conf", "min_iou", "iou<0.5", "ap50"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>6}  {:>6}  {:>7.4}  {:>8.4}  {:>7.4}  {:>7}  {:>6.4}",
            name, r.n_images, r.n_rois, r.avg_iou, r.avg_confidence, r.min_iou, r.n_below_half, r.ap50
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sq(cx: f64, cy: f64, s: f64) -> BBox<f64> {
        BBox::square(cx, cy, s, Frame::original("i")).unwrap()
    }

    fn pred(b: BBox<f64>, c: f64) -> Prediction<f64> {
        Prediction {
            bbox: b,
            confidence: c,
            anchor: 0,
        }
    }

    /// Box whose IoU with `sq(0, 0, 10)` is exactly `v` (same height, shifted).
    fn at_iou(v: f64) -> BBox<f64> {
        // overlap width x: x / (20 − x) = v
        let x = 20.0 * v / (1.0 + v);
        BBox::new(10.0 - x, 0.0, 10.0, 10.0, Frame::original("i")).unwrap()
    }

    #[test]
    fn matching_examples() {
        let gts = [sq(10.0, 10.0, 10.0), sq(50.0, 10.0, 10.0)];
        let perfect = match_for_metrics(&gts, &gts).unwrap();
        assert_eq!(perfect.ious, vec![1.0, 1.0]);
        let none = match_for_metrics::<f64>(&[], &gts).unwrap();
        assert_eq!(none.ious, vec![0.0, 0.0]);
        assert_eq!(none.pred, vec![None, None]);
    }

    #[test]
    fn crossed_pairs_follow_greedy_order() {
        // both predictions overlap both ground truths
        let gts = [sq(10.0, 10.0, 10.0), sq(16.0, 10.0, 10.0)];
        let preds = [sq(14.0, 10.0, 10.0), sq(11.0, 10.0, 10.0)];
        let m = match_for_metrics(&preds, &gts).unwrap();
        let iou = |p: usize, g: usize| preds[p].iou_unchecked(&gts[g]);
        // brute force: the greedy order takes the single largest pair first
        let mut best = (0.0, 0, 0);
        for p in 0..2 {
            for g in 0..2 {
                if iou(p, g) > best.0 {
                    best = (iou(p, g), p, g);
                }
            }
        }
        assert_eq!(m.pred[best.2], Some(best.1));
        assert_eq!(m.pred[1 - best.2], Some(1 - best.1));
    }

    #[test]
    fn ap_fixture() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, false], 2).unwrap(), 0.0);
        assert!(average_precision(&[], 0).is_err());
    }

    #[test]
    fn ap_over_boxes() {
        let g = sq(0.0, 0.0, 10.0);
        let gts = vec![vec![g.clone()], vec![g.clone()]];
        let preds = vec![
            vec![pred(g.clone(), 0.9), pred(at_iou(0.3), 0.8)],
            vec![pred(at_iou(0.7), 0.7)],
        ];
        assert!((ap50(&preds, &gts).unwrap() - 0.8333333333333333).abs() < 1e-12);
        let low = vec![vec![pred(at_iou(0.3), 0.9)], vec![pred(at_iou(0.49), 0.8)]];
        assert_eq!(ap50(&low, &gts).unwrap(), 0.0);
    }

    #[test]
    fn report_examples() {
        let g = sq(0.0, 0.0, 10.0);
        let gts = vec![vec![g.clone()], vec![g.clone()]];
        let r = report(&[vec![pred(at_iou(0.8), 0.9)], vec![pred(at_iou(0.9), 0.7)]], &gts).unwrap();
        assert!((r.avg_iou - 0.85).abs() < 1e-12);
        assert!((r.avg_confidence - 0.8).abs() < 1e-12);
        assert_eq!(r.min_confidence, 0.7);
        let r = report(&[vec![pred(at_iou(0.3861), 0.9)], vec![pred(at_iou(0.9), 0.7)]], &gts).unwrap();
        assert!((r.min_iou - 0.3861).abs() < 1e-12);
        assert_eq!(r.n_below_half, 1);
        let one = report(&[vec![pred(g.clone(), 1.0)]], &[vec![g.clone()]]).unwrap();
        assert_eq!(
            (one.avg_iou, one.avg_confidence, one.min_iou, one.ap50, one.n_below_half),
            (1.0, 1.0, 1.0, 1.0, 0)
        );
        let miss = report::<f64>(&[vec![]], &[vec![g]]).unwrap();
        assert_eq!((miss.n_below_half, miss.avg_iou, miss.ap50), (1, 0.0, 0.0));
        assert!(report::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn report_table_layout() {
        let g = sq(0.0, 0.0, 10.0);
        let r = report(&[vec![pred(g.clone(), 0.5)]], &[vec![g]]).unwrap();
        let t = report_table(&[("test", &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("dataset"));
        assert!(lines[1].contains("1.0000") && lines[1].contains("0.5000"));
        assert!(r.to_json().unwrap().contains("\"ap50\": 1.0"));
    }

    /// Precision at each recall level k / n_gt, maximized over all ranks
    /// reaching that recall, summed in recall steps of 1 / n_gt.
    fn brute_ap(flags: &[bool], n_gt: usize) -> f64 {
        let mut ap = 0.0;
        for k in 1..=n_gt {
            let mut best: f64 = 0.0;
            for cut in 1..=flags.len() {
                let tp = flags[..cut].iter().filter(|&&f| f).count();
                if tp >= k {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            ap += best / n_gt as f64;
        }
        ap
    }

    #[test]
    fn matches_brute_force_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n_gt = rng.gen_range(1..=6);
            let n_pred = rng.gen_range(0..=20);
            let flags: Vec<bool> = (0..n_pred).map(|_| rng.gen_bool(0.5)).collect();
            // at most n_gt true positives can exist
            let mut seen = 0;
            let flags: Vec<bool> = flags
                .into_iter()
                .map(|f| {
                    let ok = f && seen < n_gt;
                    seen += ok as usize;
                    ok
                })
                .collect();
            let ap = average_precision(&flags, n_gt).unwrap();
            assert!((ap - brute_ap(&flags, n_gt)).abs() < 1e-12);
        }
    }
}
