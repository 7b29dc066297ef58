//! Boxes, coordinate frames, IoU and the pad-to-square/resize transform.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Coordinate frame a box lives in.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Pixel coordinates of the named source image.
    Original(Arc<str>),
    /// Square model canvas with the given side in pixels.
    Canvas(u32),
}

impl Frame {
    pub fn original(id: impl AsRef<str>) -> Self {
        Frame::Original(Arc::from(id.as_ref()))
    }

    pub fn is_canvas(&self) -> bool {
        matches!(self, Frame::Canvas(_))
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::Original(id) => write!(f, "original({id})"),
            Frame::Canvas(s) => write!(f, "canvas({s})"),
        }
    }
}

/// Axis-aligned box in center/size form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    pub frame: Frame,
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T, frame: Frame) -> Result<Self> {
        let b = BBox { cx, cy, w, h, frame };
        b.check_sides()?;
        Ok(b)
    }

    pub fn square(cx: T, cy: T, side: T, frame: Frame) -> Result<Self> {
        Self::new(cx, cy, side, side, frame)
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T, frame: Frame) -> Result<Self> {
        let two = T::of(2.0);
        Self::new((x0 + x1) / two, (y0 + y1) / two, x1 - x0, y1 - y0, frame)
    }

    pub(crate) fn check_sides(&self) -> Result<()> {
        let ok = |v: T| v.is_finite() && v > T::zero();
        if ok(self.w) && ok(self.h) && self.cx.is_finite() && self.cy.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveSide {
                w: self.w.to_f64_lossy(),
                h: self.h.to_f64_lossy(),
            })
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (T, T, T, T) {
        let two = T::of(2.0);
        let (hw, hh) = (self.w / two, self.h / two);
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_square(&self) -> bool {
        self.w == self.h
    }

    /// Intersection with the rectangle `[0, width] × [0, height]`, or `None`
    /// when nothing of the box remains.
    pub fn clipped(&self, width: T, height: T) -> Option<Self> {
        let (x0, y0, x1, y1) = self.corners();
        let x0 = x0.max(T::zero());
        let y0 = y0.max(T::zero());
        let x1 = x1.min(width);
        let y1 = y1.min(height);
        if x1 > x0 && y1 > y0 {
            BBox::from_corners(x0, y0, x1, y1, self.frame.clone()).ok()
        } else {
            None
        }
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
        let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
        iw * ih
    }

    /// Intersection over union. Both boxes must share a frame.
    pub fn iou(&self, other: &Self) -> Result<T> {
        if self.frame != other.frame {
            return Err(Error::FrameMismatch {
                left: self.frame.to_string(),
                right: other.frame.to_string(),
            });
        }
        self.check_sides()?;
        other.check_sides()?;
        Ok(self.iou_unchecked(other))
    }

    /// IoU without frame or side validation, for hot loops over boxes that
    /// are already known to be valid and comparable.
    pub fn iou_unchecked(&self, other: &Self) -> T {
        if self == other {
            return T::one();
        }
        let inter = self.intersection_area(other);
        if inter <= T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        (inter / union).min(T::one())
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Original image pixels to canvas.
    Forward,
    /// Canvas back to original image pixels.
    Inverse,
}

/// Centered zero padding to a square followed by a uniform resize to the
/// canvas side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadResizeTransform {
    pub orig_w: u32,
    pub orig_h: u32,
    pub pad_left: u32,
    pub pad_top: u32,
    pub square_side: u32,
    pub target: u32,
    #[serde(default = "empty_id")]
    pub image_id: Arc<str>,
}

fn empty_id() -> Arc<str> {
    Arc::from("")
}

/// Build the transform for an `orig_w × orig_h` image and a `target` canvas.
pub fn make_transform(orig_w: u32, orig_h: u32, target: u32) -> Result<PadResizeTransform> {
    if orig_w == 0 || orig_h == 0 || target == 0 {
        return Err(Error::InvalidDimension(format!(
            "transform needs positive sizes, got {orig_w}x{orig_h} -> {target}"
        )));
    }
    let square_side = orig_w.max(orig_h);
    Ok(PadResizeTransform {
        orig_w,
        orig_h,
        pad_left: (square_side - orig_w) / 2,
        pad_top: (square_side - orig_h) / 2,
        square_side,
        target,
        image_id: empty_id(),
    })
}

impl PadResizeTransform {
    /// Tag the transform with the source image id used for inverse-mapped boxes.
    pub fn for_image(mut self, id: impl AsRef<str>) -> Self {
        self.image_id = Arc::from(id.as_ref());
        self
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::of(self.target as f64) / T::of(self.square_side as f64)
    }

    pub fn is_identity(&self) -> bool {
        self.pad_left == 0 && self.pad_top == 0 && self.square_side == self.target
    }

    pub fn canvas_frame(&self) -> Frame {
        Frame::Canvas(self.target)
    }

    pub fn original_frame(&self) -> Frame {
        Frame::Original(self.image_id.clone())
    }

    pub fn map_box<T: Scalar>(&self, b: &BBox<T>, direction: Direction) -> Result<BBox<T>> {
        let s: T = self.scale();
        let pl = T::of(self.pad_left as f64);
        let pt = T::of(self.pad_top as f64);
        match direction {
            Direction::Forward => {
                if b.frame.is_canvas() {
                    return Err(Error::WrongFrame {
                        op: "map_box(forward)",
                        expected: "original",
                        actual: b.frame.to_string(),
                    });
                }
                BBox::new(
                    (b.cx + pl) * s,
                    (b.cy + pt) * s,
                    b.w * s,
                    b.h * s,
                    self.canvas_frame(),
                )
            }
            Direction::Inverse => {
                if b.frame != self.canvas_frame() {
                    return Err(Error::WrongFrame {
                        op: "map_box(inverse)",
                        expected: "canvas",
                        actual: b.frame.to_string(),
                    });
                }
                BBox::new(
                    b.cx / s - pl,
                    b.cy / s - pt,
                    b.w / s,
                    b.h / s,
                    self.original_frame(),
                )
            }
        }
    }
}

pub fn map_box<T: Scalar>(
    t: &PadResizeTransform,
    b: &BBox<T>,
    direction: Direction,
) -> Result<BBox<T>> {
    t.map_box(b, direction)
}
