//! Staged training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::loss::{detection_loss, detection_loss_terms};
use super::matching::{match_anchors, MatchResult};
use super::optim::Adam;
use crate::anchors::AnchorSet;
use crate::dataset::{augment, preprocess, GrayImage, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{match_for_metrics, predict_canvases, stack_canvases, PredictConfig};
use crate::geometry::{BBox, Direction, PadResizeTransform};
use crate::nnet::{DetectorModel, Graph, Tensor};
use crate::scalar::Scalar;

/// A preprocessed training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// `[1, S, S]`.
    pub canvas: Tensor<T>,
    /// Ground truths in the canvas frame.
    pub boxes: Vec<BBox<T>>,
    pub transform: PadResizeTransform,
}

/// Preprocess one annotated image.
pub fn prepare_sample<T: Scalar>(image: &GrayImage, rec: &ImageRecord, side: u32) -> Result<Sample<T>> {
    if image.width != rec.width || image.height != rec.height {
        return Err(Error::Validation(vec![format!(
            "image {}: raster is {}x{}, annotation says {}x{}",
            rec.id, image.width, image.height, rec.width, rec.height
        )]));
    }
    let (canvas, t) = preprocess::<T>(image, side)?;
    let t = t.for_image(&rec.id);
    let boxes = rec
        .boxes::<T>()?
        .iter()
        .map(|b| t.map_box(b, Direction::Forward))
        .collect::<Result<_>>()?;
    Ok(Sample {
        id: rec.id.clone(),
        canvas,
        boxes,
        transform: t,
    })
}

pub fn prepare_samples<T: Scalar>(
    images: &[GrayImage],
    records: &[ImageRecord],
    side: u32,
) -> Result<Vec<Sample<T>>> {
    if images.len() != records.len() {
        return Err(Error::InvalidConfig(format!(
            "{} rasters for {} annotation records",
            images.len(),
            records.len()
        )));
    }
    images
        .iter()
        .zip(records)
        .map(|(i, r)| prepare_sample(i, r, side))
        .collect()
}

/// Shuffle `0..n` with `seed` and hold out `round(fraction · n)` indices
/// (at least one when `fraction > 0` and `n ≥ 2`). Returns `(train, val)`,
/// each sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut n_val = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.max(1);
    }
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    /// 1-based.
    pub stage: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_avg_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: DetectorModel<T>,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// History as CSV with header `epoch,stage,train_loss,val_loss,val_avg_iou`;
/// missing validation values are left empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,stage,train_loss,val_loss,val_avg_iou\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{}",
            r.epoch,
            r.stage,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_avg_iou)
        );
    }
    s
}

/// Mean loss and mean best-match IoU (canvas frame) over `samples`.
pub fn evaluate_samples<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[&Sample<T>],
    matches: &[MatchResult<T>],
    anchors: &AnchorSet<T>,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let bs = cfg.optimizer.batch_size;
    let mut loss = 0.0;
    for (chunk, m) in samples.chunks(bs).zip(matches.chunks(bs)) {
        let canvases: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.canvas).collect();
        let (l, o) = model.infer(&stack_canvases(&canvases)?)?;
        let (parts, _, _) = detection_loss_terms(&l, &o, m, &cfg.focal, cfg.box_weight)?;
        loss += parts.total * chunk.len() as f64;
    }
    let canvases: Vec<&Tensor<T>> = samples.iter().map(|s| &s.canvas).collect();
    let preds = predict_canvases(model, &canvases, anchors, &PredictConfig::default(), bs)?;
    let mut ious = Vec::new();
    for (p, s) in preds.iter().zip(samples) {
        let boxes: Vec<BBox<T>> = p.iter().map(|q| q.bbox.clone()).collect();
        ious.extend(match_for_metrics(&boxes, &s.boxes)?.ious);
    }
    let n = samples.len().max(1) as f64;
    let avg_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok((loss / n, avg_iou))
}

/// Run every stage of the schedule: stage `s` trains the groups its unfreeze
/// level allows under a one-cycle schedule of `cycles` epochs, with rates
/// divided per group. Shuffling, augmentation and the train/validation split
/// are drawn from `seed` alone.
pub fn train<T: Scalar>(
    model: DetectorModel<T>,
    samples: &[Sample<T>],
    anchors: &AnchorSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    train_with_progress(model, samples, anchors, cfg, seed, &mut |_| {})
}

pub fn train_with_progress<T: Scalar>(
    mut model: DetectorModel<T>,
    samples: &[Sample<T>],
    anchors: &AnchorSet<T>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if model.config.total_anchors() != anchors.total() {
        return Err(Error::InvalidConfig(format!(
            "model head emits {} anchors, anchor set has {}",
            model.config.total_anchors(),
            anchors.total()
        )));
    }
    if model.config.canvas_side != anchors.canvas_side {
        return Err(Error::InvalidConfig(format!(
            "model canvas {} differs from anchor canvas {}",
            model.config.canvas_side, anchors.canvas_side
        )));
    }
    let pos = T::of(cfg.pos_threshold);
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, seed);
    let val: Vec<&Sample<T>> = val_idx.iter().map(|&i| &samples[i]).collect();
    let val_matches = val
        .iter()
        .map(|s| match_anchors(anchors, &s.boxes, pos))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let bs = cfg.optimizer.batch_size;
    let steps_per_epoch = train_idx.len().div_ceil(bs);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut epoch = 0;
    for (si, stage) in cfg.schedule.stages.iter().enumerate() {
        let level = stage.unfreeze_level;
        let mut opt = Adam::new(cfg.optimizer, &model.params);
        let total = stage.cycles * steps_per_epoch;
        let mut step = 0;
        for _ in 0..stage.cycles {
            epoch += 1;
            let mut order = train_idx.clone();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(bs) {
                let mut canvases = Vec::with_capacity(batch.len());
                let mut matches = Vec::with_capacity(batch.len());
                for &i in batch {
                    let s = &samples[i];
                    let (c, boxes, _) = augment(&s.canvas, &s.boxes, &cfg.augment, &mut rng)?;
                    matches.push(match_anchors(anchors, &boxes, pos)?);
                    canvases.push(c);
                }
                let refs: Vec<&Tensor<T>> = canvases.iter().collect();
                let x = stack_canvases(&refs)?;
                let mut g = Graph::new();
                let out = model.forward(&mut g, &x, &|grp| level.trains(grp))?;
                let (loss, parts) =
                    detection_loss(&mut g, out.logits, out.offsets, &matches, &cfg.focal, cfg.box_weight)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: si + 1,
                        epoch,
                        step,
                    });
                }
                g.backward(loss);
                let rate = lr_at(step, total, stage.lr_max)?;
                let lrs: Vec<f64> = model
                    .params
                    .iter()
                    .map(|p| cfg.schedule.group_rate(rate, p.group))
                    .collect();
                let grads: Vec<Option<&[T]>> = model
                    .params
                    .iter()
                    .zip(&out.params)
                    .map(|(p, &v)| if level.trains(p.group) { g.grad(v) } else { None })
                    .collect();
                opt.step(&mut model.params, &grads, &lrs)?;
                if model.params.iter().any(|p| !p.value.all_finite()) {
                    return Err(Error::NonFiniteLoss {
                        stage: si + 1,
                        epoch,
                        step,
                    });
                }
                step_losses.push(parts.total);
                epoch_loss += parts.total * batch.len() as f64;
                step += 1;
            }
            let (val_loss, val_avg_iou) = if val.is_empty() {
                (None, None)
            } else {
                let (l, i) = evaluate_samples(&model, &val, &val_matches, anchors, cfg)?;
                (Some(l), Some(i))
            };
            let rec = EpochRecord {
                epoch,
                stage: si + 1,
                train_loss: epoch_loss / train_idx.len() as f64,
                val_loss,
                val_avg_iou,
            };
            on_epoch(&rec);
            history.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        step_losses,
        train_ids: train_idx.iter().map(|&i| samples[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| samples[i].id.clone()).collect(),
    })
}
