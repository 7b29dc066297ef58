//! Anchor assignment and the box offset parameterization.

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Upper bound on decoded log-size offsets, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Per-anchor assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T> {
    /// Ground-truth index of each positive anchor, `None` for background.
    pub assigned: Vec<Option<usize>>,
    /// Regression targets, zero for background anchors.
    pub targets: Vec<[T; 4]>,
}

impl<T: Scalar> MatchResult<T> {
    pub fn n_anchors(&self) -> usize {
        self.assigned.len()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assigned
            .iter()
            .enumerate()
            .filter_map(|(a, g)| g.map(|g| (a, g)))
    }

    pub fn n_positive(&self) -> usize {
        self.assigned.iter().filter(|g| g.is_some()).count()
    }

    /// Every anchor is background.
    pub fn background(n_anchors: usize) -> Self {
        MatchResult {
            assigned: vec![None; n_anchors],
            targets: vec![[T::zero(); 4]; n_anchors],
        }
    }
}

/// Mark as positive the best anchor of every ground truth plus every anchor
/// whose IoU with some ground truth reaches `pos_threshold`. An anchor
/// qualifying for several boxes takes its highest-IoU box; ties at equal IoU
/// go to the lowest index.
pub fn match_anchors<T: Scalar>(
    anchors: &AnchorSet<T>,
    gts: &[BBox<T>],
    pos_threshold: T,
) -> Result<MatchResult<T>> {
    let n = anchors.total();
    if n == 0 {
        return Err(Error::Empty("anchor set"));
    }
    let frame = anchors.frame();
    for g in gts {
        if g.frame != frame {
            return Err(Error::FrameMismatch {
                left: frame.to_string(),
                right: g.frame.to_string(),
            });
        }
        g.check_sides()?;
    }
    let mut result = MatchResult::background(n);
    if gts.is_empty() {
        return Ok(result);
    }
    let ious: Vec<Vec<T>> = anchors
        .anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.bbox.iou_unchecked(g)).collect())
        .collect();
    for (a, row) in ious.iter().enumerate() {
        let mut best = (T::zero(), 0usize);
        for (gi, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, gi);
            }
        }
        if best.0 >= pos_threshold {
            result.assigned[a] = Some(best.1);
        }
    }
    // each box claims its best anchor not already claimed by an earlier box
    let mut forced = vec![false; n];
    for gi in 0..gts.len() {
        let mut best: Option<(T, usize)> = None;
        for (a, row) in ious.iter().enumerate() {
            if !forced[a] && best.map_or(true, |(v, _)| row[gi] > v) {
                best = Some((row[gi], a));
            }
        }
        if let Some((_, a)) = best {
            forced[a] = true;
            result.assigned[a] = Some(gi);
        }
    }
    for a in 0..n {
        if let Some(gi) = result.assigned[a] {
            result.targets[a] = encode_box(&anchors.anchors[a].bbox, &gts[gi])?;
        }
    }
    Ok(result)
}

/// `[(cx_g − cx_a)/w_a, (cy_g − cy_a)/h_a, ln(w_g/w_a), ln(h_g/h_a)]`.
pub fn encode_box<T: Scalar>(anchor: &BBox<T>, gt: &BBox<T>) -> Result<[T; 4]> {
    anchor.check_sides()?;
    gt.check_sides()?;
    Ok([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

/// Inverse of [`encode_box`]; the box takes the anchor's frame. Log-size
/// offsets are capped at [`MAX_LOG_SCALE`].
pub fn decode_box<T: Scalar>(anchor: &BBox<T>, offsets: &[T; 4]) -> Result<BBox<T>> {
    anchor.check_sides()?;
    if offsets.iter().any(|v| v.is_nan()) {
        return Err(Error::OutOfRange(format!("offsets {offsets:?} contain NaN")));
    }
    let cap = T::of(MAX_LOG_SCALE);
    BBox::new(
        anchor.cx + offsets[0] * anchor.w,
        anchor.cy + offsets[1] * anchor.h,
        anchor.w * offsets[2].min(cap).exp(),
        anchor.h * offsets[3].min(cap).exp(),
        anchor.frame.clone(),
    )
}
