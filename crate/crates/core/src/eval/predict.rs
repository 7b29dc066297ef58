//! Turning raw head outputs into scored boxes.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::dataset::{preprocess, GrayImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Direction, PadResizeTransform};
use crate::nnet::{sigmoid, DetectorModel, Tensor};
use crate::scalar::Scalar;
use crate::training::decode_box;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub top_k: usize,
    pub nms_iou: f64,
    pub conf_floor: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            top_k: 2,
            nms_iou: 0.4,
            conf_floor: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub bbox: BBox<T>,
    pub confidence: T,
    /// Index of the anchor the box was decoded from.
    pub anchor: usize,
}

/// Greedy suppression in descending confidence (ties by input index); a
/// candidate is dropped when its IoU with a kept box exceeds `iou_threshold`.
/// Returns kept indices in keep order.
pub fn nms<T: Scalar>(candidates: &[(BBox<T>, T)], iou_threshold: T) -> Vec<usize> {
    nms_limited(candidates, iou_threshold, usize::MAX)
}

fn nms_limited<T: Scalar>(candidates: &[(BBox<T>, T)], thr: T, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        let b = &candidates[i].0;
        if kept.iter().all(|&k| candidates[k].0.iou_unchecked(b) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Decode one image's head outputs (`logits` `[A]`, `offsets` `[A·4]`) into
/// canvas-frame predictions: sigmoid confidence, floor filter, decode, clip
/// to the canvas, NMS, top-k.
pub fn decode_predictions<T: Scalar>(
    logits: &[T],
    offsets: &[T],
    anchors: &AnchorSet<T>,
    cfg: &PredictConfig,
) -> Result<Vec<Prediction<T>>> {
    let a = anchors.total();
    if logits.len() != a || offsets.len() != 4 * a {
        return Err(Error::shape(
            "decode_predictions",
            format!("{} logits and {} offsets for {a} anchors", logits.len(), offsets.len()),
        ));
    }
    let side = T::of(anchors.canvas_side as f64);
    let floor = T::of(cfg.conf_floor);
    let mut cands = Vec::new();
    let mut source = Vec::new();
    for (i, &z) in logits.iter().enumerate() {
        let conf = sigmoid(z);
        if conf.is_nan() || conf < floor || conf <= T::zero() {
            continue;
        }
        let o = [offsets[4 * i], offsets[4 * i + 1], offsets[4 * i + 2], offsets[4 * i + 3]];
        if o.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let b = decode_box(&anchors.anchors[i].bbox, &o)?;
        if let Some(b) = b.clipped(side, side) {
            cands.push((b, conf));
            source.push(i);
        }
    }
    let kept = nms_limited(&cands, T::of(cfg.nms_iou), cfg.top_k);
    Ok(kept
        .into_iter()
        .map(|k| Prediction {
            bbox: cands[k].0.clone(),
            confidence: cands[k].1,
            anchor: source[k],
        })
        .collect())
}

/// Map canvas predictions back to the original image and clip them to its
/// bounds; boxes lying entirely in the padding are dropped.
pub fn to_original<T: Scalar>(
    preds: Vec<Prediction<T>>,
    transform: &PadResizeTransform,
) -> Result<Vec<Prediction<T>>> {
    let (w, h) = (T::of(transform.orig_w as f64), T::of(transform.orig_h as f64));
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let b = transform.map_box(&p.bbox, Direction::Inverse)?;
        if let Some(b) = b.clipped(w, h) {
            out.push(Prediction { bbox: b, ..p });
        }
    }
    Ok(out)
}

/// Run the model on preprocessed canvases (`[1, S, S]` each) in batches and
/// decode canvas-frame predictions per canvas.
pub fn predict_canvases<T: Scalar>(
    model: &DetectorModel<T>,
    canvases: &[&Tensor<T>],
    anchors: &AnchorSet<T>,
    cfg: &PredictConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Prediction<T>>>> {
    let a = anchors.total();
    if model.config.total_anchors() != a {
        return Err(Error::shape(
            "predict",
            format!("model head emits {} anchors, anchor set has {a}", model.config.total_anchors()),
        ));
    }
    let mut out = Vec::with_capacity(canvases.len());
    for chunk in canvases.chunks(batch_size.max(1)) {
        let (logits, offsets) = model.infer(&stack_canvases(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(decode_predictions(
                &logits.data()[i * a..(i + 1) * a],
                &offsets.data()[i * a * 4..(i + 1) * a * 4],
                anchors,
                cfg,
            )?);
        }
    }
    Ok(out)
}

/// Stack `[1, S, S]` canvases into a `[B, 1, S, S]` batch.
pub fn stack_canvases<T: Scalar>(canvases: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let t = Tensor::stack(canvases)?;
    let mut shape = t.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(1, 1);
    }
    t.reshape(&shape)
}

/// Preprocess `image`, run the model and return predictions in the
/// original frame of `image_id`.
pub fn predict<T: Scalar>(
    model: &DetectorModel<T>,
    image: &GrayImage,
    image_id: &str,
    anchors: &AnchorSet<T>,
    cfg: &PredictConfig,
) -> Result<Vec<Prediction<T>>> {
    let (canvas, t) = preprocess::<T>(image, anchors.canvas_side)?;
    let t = t.for_image(image_id);
    let preds = predict_canvases(model, &[&canvas], anchors, cfg, 1)?;
    to_original(preds.into_iter().next().unwrap_or_default(), &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{build_grid, AnchorLayerSpec};
    use crate::geometry::{make_transform, Frame};
    use crate::training::{encode_box, match_anchors};

    fn canvas_box(cx: f64, cy: f64, s: f64) -> BBox<f64> {
        BBox::square(cx, cy, s, Frame::Canvas(224)).unwrap()
    }

    fn anchors() -> AnchorSet<f64> {
        build_grid(&AnchorLayerSpec::new(vec![7]), &[0.7, 1.0, 1.3, 1.6, 1.9, 2.2]).unwrap()
    }

    #[test]
    fn nms_examples() {
        let a = canvas_box(50.0, 50.0, 20.0);
        let far = canvas_box(150.0, 150.0, 20.0);
        assert_eq!(nms(&[(a.clone(), 0.9), (far.clone(), 0.8)], 0.4), vec![0, 1]);
        // IoU exactly 0.5: [0,2]x[0,2] vs [0,2]x[0.667..2.667]
        let b = BBox::<f64>::from_corners(0.0, 0.0, 2.0, 2.0, Frame::Canvas(224)).unwrap();
        let c = BBox::from_corners(0.0, 2.0 / 3.0, 2.0, 2.0 + 2.0 / 3.0, Frame::Canvas(224)).unwrap();
        assert!((b.iou_unchecked(&c) - 0.5).abs() < 1e-12);
        assert_eq!(nms(&[(c.clone(), 0.6), (b.clone(), 0.7)], 0.4), vec![1]);
        assert_eq!(nms(&[(c, 0.6), (b, 0.7)], 1.0), vec![1, 0]);
        // duplicates: first index wins the tie
        assert_eq!(nms(&[(a.clone(), 0.9), (a, 0.9)], 0.4), vec![0]);
    }

    #[test]
    fn nms_is_order_independent() {
        let boxes: Vec<(BBox<f64>, f64)> = (0..12)
            .map(|i| (canvas_box(40.0 + 9.0 * i as f64, 80.0, 30.0), 0.1 + 0.07 * i as f64))
            .collect();
        let kept: Vec<BBox<f64>> = nms(&boxes, 0.4).into_iter().map(|k| boxes[k].0.clone()).collect();
        let mut rev = boxes.clone();
        rev.reverse();
        let kept_rev: Vec<BBox<f64>> = nms(&rev, 0.4).into_iter().map(|k| rev[k].0.clone()).collect();
        assert_eq!(kept, kept_rev);
    }

    #[test]
    fn silent_head_predicts_nothing() {
        let s = anchors();
        let logits = vec![f64::NEG_INFINITY; s.total()];
        let offsets = vec![0.0; 4 * s.total()];
        let p = decode_predictions(&logits, &offsets, &s, &PredictConfig::default()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn oracle_offsets_reproduce_ground_truth() {
        let s = anchors();
        let t = make_transform(600, 480, 224).unwrap().for_image("img");
        let gts = [
            BBox::square(180.0, 250.0, 110.0, Frame::original("img")).unwrap(),
            BBox::square(420.0, 240.0, 95.0, Frame::original("img")).unwrap(),
        ];
        let canvas: Vec<BBox<f64>> = gts.iter().map(|g| t.map_box(g, Direction::Forward).unwrap()).collect();
        let m = match_anchors(&s, &canvas, 0.5).unwrap();
        let mut logits = vec![-20.0; s.total()];
        let mut offsets = vec![0.0; 4 * s.total()];
        for (a, gi) in m.positives() {
            logits[a] = 8.0;
            let o = encode_box(&s.anchors[a].bbox, &canvas[gi]).unwrap();
            offsets[4 * a..4 * a + 4].copy_from_slice(&o);
        }
        let p = decode_predictions(&logits, &offsets, &s, &PredictConfig::default()).unwrap();
        let p = to_original(p, &t).unwrap();
        assert_eq!(p.len(), 2);
        for g in &gts {
            let hit = p.iter().find(|q| (q.bbox.cx - g.cx).abs() < 1.0).unwrap();
            assert!((hit.bbox.cy - g.cy).abs() < 1.0);
            assert!((hit.bbox.w - g.w).abs() < 1.0 && (hit.bbox.h - g.h).abs() < 1.0);
            assert_eq!(hit.bbox.frame, Frame::original("img"));
        }
    }

    #[test]
    fn predictions_clip_to_image() {
        let s = anchors();
        let mut logits = vec![-20.0; s.total()];
        let mut offsets = vec![0.0; 4 * s.total()];
        logits[0] = 5.0;
        offsets[2] = 1.0;
        offsets[3] = 1.0;
        let p = decode_predictions(&logits, &offsets, &s, &PredictConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        let (x0, y0, _, _) = p[0].bbox.corners();
        assert!(x0 >= 0.0 && y0 >= 0.0);
        let t = make_transform(224, 300, 224).unwrap().for_image("w");
        let o = to_original(p, &t).unwrap();
        let (x0, y0, x1, y1) = o[0].bbox.corners();
        assert_eq!(x0, 0.0);
        assert!(y0 >= 0.0 && x1 <= 224.0 && y1 <= 300.0);
    }

    #[test]
    fn top_k_limits_output() {
        let s = anchors();
        let logits = vec![3.0; s.total()];
        let offsets = vec![0.0; 4 * s.total()];
        for k in [1, 2, 5] {
            let cfg = PredictConfig { top_k: k, ..PredictConfig::default() };
            assert_eq!(decode_predictions(&logits, &offsets, &s, &cfg).unwrap().len(), k);
        }
        assert!(decode_predictions(&logits[1..], &offsets, &s, &PredictConfig::default()).is_err());
    }
}
