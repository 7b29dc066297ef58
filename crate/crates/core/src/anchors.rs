//! Anchor grids and data-driven anchor scale selection.
//!
//! An anchor for grid `G` on an `S`-pixel canvas sits at the center of its
//! `S/G` cell and has side `scale · S/G`. Its *coverage* `scale / G` is the
//! anchor side as a fraction of the canvas side, which is directly comparable
//! to an ROI's `side / long side` ratio.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetStats;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Frame};
use crate::scalar::Scalar;

/// Recommended scales are multiples of this grain.
pub const SCALE_GRAIN: f64 = 0.05;
/// Default quantile trim for [`recommend_scales`].
pub const DEFAULT_MARGIN: f64 = 0.02;

const ALIGN_TOL: f64 = 1e-9;

/// Arithmetic range of anchor scales, `start..=stop` by `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec<T> {
    pub start: T,
    pub stop: T,
    pub step: T,
}

impl<T: Scalar> ScaleSpec<T> {
    pub fn new(start: T, stop: T, step: T) -> Result<Self> {
        let s = ScaleSpec { start, stop, step };
        s.count()?;
        Ok(s)
    }

    /// Number of scales, validating the spec.
    pub fn count(&self) -> Result<usize> {
        let (start, stop, step) = (
            self.start.to_f64_lossy(),
            self.stop.to_f64_lossy(),
            self.step.to_f64_lossy(),
        );
        if !(start > 0.0 && stop >= start && step > 0.0 && stop.is_finite() && step.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "scale range needs start > 0, stop >= start, step > 0; got ({start}, {stop}, {step})"
            )));
        }
        let steps = ((stop - start) / step + ALIGN_TOL).floor();
        // tolerance scaled to the working precision
        let tol = ALIGN_TOL.max(T::epsilon().to_f64_lossy() * 16.0 * stop.max(1.0));
        if ((stop - start) - steps * step).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "stop {stop} is not start {start} plus a whole number of steps {step}"
            )));
        }
        Ok(steps as usize + 1)
    }
}

/// Expand a scale range into its values.
pub fn expand_scales<T: Scalar>(spec: &ScaleSpec<T>) -> Result<Vec<T>> {
    let n = spec.count()?;
    Ok((0..n)
        .map(|i| spec.start + T::of_usize(i) * spec.step)
        .collect())
}

/// Grids sharing one canvas, each contributing `G²·|scales|·|aspects|` anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLayerSpec {
    pub grids: Vec<usize>,
    #[serde(default = "default_canvas")]
    pub canvas_side: u32,
    #[serde(default = "default_aspects")]
    pub aspect_ratios: Vec<f64>,
}

fn default_canvas() -> u32 {
    224
}

fn default_aspects() -> Vec<f64> {
    vec![1.0]
}

impl AnchorLayerSpec {
    pub fn new(grids: Vec<usize>) -> Self {
        AnchorLayerSpec {
            grids,
            canvas_side: default_canvas(),
            aspect_ratios: default_aspects(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() || self.grids.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "grids must be nonempty with every G >= 1, got {:?}",
                self.grids
            )));
        }
        if self.canvas_side == 0 {
            return Err(Error::InvalidConfig("canvas side must be positive".into()));
        }
        if self.aspect_ratios.is_empty()
            || self.aspect_ratios.iter().any(|a| !(a.is_finite() && *a > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "aspect ratios must be positive, got {:?}",
                self.aspect_ratios
            )));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self, n_scales: usize) -> usize {
        n_scales * self.aspect_ratios.len()
    }

    pub fn total(&self, n_scales: usize) -> usize {
        self.grids.iter().map(|g| g * g).sum::<usize>() * self.anchors_per_cell(n_scales)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T> {
    pub bbox: BBox<T>,
    pub grid: usize,
    /// `(row, column)`.
    pub cell: (usize, usize),
    pub scale: T,
    pub aspect: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet<T> {
    pub anchors: Vec<Anchor<T>>,
    pub canvas_side: u32,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn total(&self) -> usize {
        self.anchors.len()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox<T>> {
        self.anchors.iter().map(|a| &a.bbox)
    }

    pub fn frame(&self) -> Frame {
        Frame::Canvas(self.canvas_side)
    }
}

/// Enumerate anchors grid-major, then row, column, scale, aspect.
pub fn build_grid<T: Scalar>(layers: &AnchorLayerSpec, scales: &[T]) -> Result<AnchorSet<T>> {
    layers.validate()?;
    if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
        return Err(Error::InvalidConfig("scales must be positive and nonempty".into()));
    }
    let side = T::of(layers.canvas_side as f64);
    let frame = Frame::Canvas(layers.canvas_side);
    let half = T::of(0.5);
    let mut anchors = Vec::with_capacity(layers.total(scales.len()));
    for &g in &layers.grids {
        let cell = side / T::of_usize(g);
        for i in 0..g {
            for j in 0..g {
                let cx = (T::of_usize(j) + half) * cell;
                let cy = (T::of_usize(i) + half) * cell;
                for &scale in scales {
                    for &ar in &layers.aspect_ratios {
                        let base = scale * cell;
                        let r = T::of(ar).sqrt();
                        let bbox = BBox::new(cx, cy, base * r, base / r, frame.clone())?;
                        anchors.push(Anchor {
                            bbox,
                            grid: g,
                            cell: (i, j),
                            scale,
                            aspect: T::of(ar),
                        });
                    }
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        canvas_side: layers.canvas_side,
    })
}

/// Anchor side as a fraction of the canvas side.
pub fn coverage<T: Scalar>(scale: T, grid: usize) -> T {
    scale / T::of_usize(grid)
}

/// Linear-interpolated quantile of a sorted list.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Choose a scale range for grid `G` whose coverage interval contains the
/// `[margin, 1 − margin]` quantile range of the observed ROI ratios.
pub fn recommend_scales(
    stats: &DatasetStats,
    grid: usize,
    margin: f64,
    step_count: usize,
) -> Result<ScaleSpec<f64>> {
    if step_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "step_count must be at least 2, got {step_count}"
        )));
    }
    if grid == 0 {
        return Err(Error::InvalidConfig("grid must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::InvalidConfig(format!("margin {margin} outside [0, 0.5)")));
    }
    let mut ratios = stats.ratios.clone();
    if ratios.is_empty() {
        return Err(Error::Empty("no ROI ratios to design anchors from"));
    }
    ratios.sort_by(f64::total_cmp);
    let q_lo = quantile(&ratios, margin);
    let q_hi = quantile(&ratios, 1.0 - margin);
    let g = grid as f64;
    let per_unit = 1.0 / SCALE_GRAIN;
    // work in whole grains; the nudges absorb representation error in q·G
    let mut lo = (q_lo * g * per_unit + ALIGN_TOL).floor() as i64;
    let mut hi = (q_hi * g * per_unit - ALIGN_TOL).ceil() as i64;
    let unit = |u: i64| u as f64 / per_unit;
    while lo > 1 && coverage(unit(lo), grid) > q_lo {
        lo -= 1;
    }
    while coverage(unit(hi), grid) < q_hi {
        hi += 1;
    }
    lo = lo.max(1);
    hi = hi.max(lo);
    // minimum span of two grains (0.1 in scale units)
    if hi - lo < 2 {
        let need = 2 - (hi - lo);
        let down = (need / 2).min(lo - 1);
        lo -= down;
        hi += need - down;
    }
    let n = step_count as i64 - 1;
    let step_units = ((hi - lo) + n - 1) / n;
    let stop_units = lo + step_units * n;
    Ok(ScaleSpec {
        start: unit(lo),
        stop: unit(stop_units),
        step: unit(step_units),
    })
}

/// Grid layout plus scale range: everything needed to rebuild an [`AnchorSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDesign {
    pub layers: AnchorLayerSpec,
    pub scales: ScaleSpec<f64>,
}

impl AnchorDesign {
    pub fn new(grids: Vec<usize>, scales: ScaleSpec<f64>) -> Self {
        AnchorDesign {
            layers: AnchorLayerSpec::new(grids),
            scales,
        }
    }

    pub fn anchors_per_cell(&self) -> Result<usize> {
        Ok(self.layers.anchors_per_cell(self.scales.count()?))
    }

    pub fn build<T: Scalar>(&self) -> Result<AnchorSet<T>> {
        let scales: Vec<T> = expand_scales(&self.scales)?
            .into_iter()
            .map(T::of)
            .collect();
        build_grid(&self.layers, &scales)
    }
}

/// JSON anchor design summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDesignReport {
    pub grids: Vec<usize>,
    pub canvas_side: u32,
    pub spec: ScaleSpec<f64>,
    pub scales: Vec<f64>,
    /// Per grid, per scale coverage fractions.
    pub coverage: Vec<Vec<f64>>,
    pub anchors_per_cell: usize,
    pub total_anchors: usize,
    /// Ratio interval the design was fitted to, when derived from data.
    pub target_ratio_range: Option<(f64, f64)>,
}

impl AnchorDesignReport {
    /// The design the report describes.
    pub fn design(&self) -> Result<AnchorDesign> {
        let mut layers = AnchorLayerSpec::new(self.grids.clone());
        layers.canvas_side = self.canvas_side;
        layers.validate()?;
        self.spec.count()?;
        Ok(AnchorDesign {
            layers,
            scales: self.spec,
        })
    }
}

pub fn design_report(
    layers: &AnchorLayerSpec,
    spec: &ScaleSpec<f64>,
    target_ratio_range: Option<(f64, f64)>,
) -> Result<AnchorDesignReport> {
    layers.validate()?;
    let scales = expand_scales(spec)?;
    Ok(AnchorDesignReport {
        grids: layers.grids.clone(),
        canvas_side: layers.canvas_side,
        spec: *spec,
        coverage: layers
            .grids
            .iter()
            .map(|&g| scales.iter().map(|&s| coverage(s, g)).collect())
            .collect(),
        anchors_per_cell: layers.anchors_per_cell(scales.len()),
        total_anchors: layers.total(scales.len()),
        scales,
        target_ratio_range,
    })
}

/// Ratio quantile range used by [`recommend_scales`].
pub fn ratio_range(stats: &DatasetStats, margin: f64) -> Option<(f64, f64)> {
    let mut r = stats.ratios.clone();
    if r.is_empty() {
        return None;
    }
    r.sort_by(f64::total_cmp);
    Some((quantile(&r, margin), quantile(&r, 1.0 - margin)))
}
