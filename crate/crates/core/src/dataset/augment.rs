//! Training-time augmentation: small random rotations and random lighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nnet::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub rotation_prob: f64,
    /// Brightness shift is drawn from `U(-balance/2, balance/2)`.
    pub lighting_balance: f64,
    /// Contrast factor is drawn from `U(1/(1+contrast), 1+contrast)`.
    pub lighting_contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 3.0,
            rotation_prob: 0.9,
            lighting_balance: 0.5,
            lighting_contrast: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn none() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            rotation_prob: 0.0,
            lighting_balance: 0.0,
            lighting_contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(0.0..=1.0).contains(&self.rotation_prob)
            || !finite_nonneg(self.max_rotation_deg)
            || !finite_nonneg(self.lighting_balance)
            || !finite_nonneg(self.lighting_contrast)
        {
            return Err(Error::InvalidConfig(format!("augmentation {self:?}")));
        }
        Ok(())
    }
}

/// The random choices made by one [`augment`] call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Rotation in degrees, `None` when rotation was skipped.
    pub rotation_deg: Option<f64>,
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Always consumes exactly four uniform draws so the stream position does
    /// not depend on the outcome.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let apply: f64 = rng.gen();
        let angle: f64 = rng.gen();
        let contrast: f64 = rng.gen();
        let bright: f64 = rng.gen();
        let rotation_deg = (apply < cfg.rotation_prob && cfg.max_rotation_deg > 0.0)
            .then(|| (2.0 * angle - 1.0) * cfg.max_rotation_deg);
        let c = cfg.lighting_contrast;
        let (clo, chi) = (1.0 / (1.0 + c), 1.0 + c);
        AugmentDraw {
            rotation_deg,
            contrast: clo + (chi - clo) * contrast,
            brightness: (bright - 0.5) * cfg.lighting_balance,
        }
    }
}

/// Apply a random rotation and lighting change to a `[1, S, S]` canvas and
/// its canvas-frame boxes.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    canvas: &Tensor<T>,
    boxes: &[BBox<T>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<BBox<T>>, AugmentDraw)> {
    let draw = AugmentDraw::sample(cfg, rng);
    let (mut out, boxes) = match draw.rotation_deg {
        Some(deg) => rotate(canvas, boxes, deg)?,
        None => (canvas.clone(), boxes.to_vec()),
    };
    apply_lighting(&mut out, draw.contrast, draw.brightness);
    Ok((out, boxes, draw))
}

fn canvas_side<T: Scalar>(canvas: &Tensor<T>) -> Result<usize> {
    match canvas.shape() {
        [1, h, w] if h == w => Ok(*h),
        s => Err(Error::shape("augment", format!("expected [1, S, S], got {s:?}"))),
    }
}

/// `p' = clamp(p + (contrast − 1)(p − ½) + brightness)`; exact identity for
/// `contrast = 1, brightness = 0`.
pub fn apply_lighting<T: Scalar>(canvas: &mut Tensor<T>, contrast: f64, brightness: f64) {
    if contrast == 1.0 && brightness == 0.0 {
        return;
    }
    let (k, b, half) = (T::of(contrast - 1.0), T::of(brightness), T::of(0.5));
    for v in canvas.data_mut() {
        *v = (*v + k * (*v - half) + b).max(T::zero()).min(T::one());
    }
}

/// Rotate the canvas by `deg` degrees about its center (bilinear, zero fill)
/// and replace each box by the axis-aligned bound of its rotated outline,
/// clipped to the canvas.
pub fn rotate<T: Scalar>(
    canvas: &Tensor<T>,
    boxes: &[BBox<T>],
    deg: f64,
) -> Result<(Tensor<T>, Vec<BBox<T>>)> {
    let side = canvas_side(canvas)?;
    let theta = deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = side as f64 / 2.0;
    let src = canvas.data();
    let mut out = vec![T::zero(); side * side];
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
            0.0
        } else {
            src[y as usize * side + x as usize].to_f64_lossy()
        }
    };
    for oy in 0..side {
        let dy = oy as f64 + 0.5 - c;
        for ox in 0..side {
            let dx = ox as f64 + 0.5 - c;
            // inverse rotation back into the source
            let sx = cos * dx + sin * dy + c - 0.5;
            let sy = -sin * dx + cos * dy + c - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + sample(x0 + 1, y0) * fx * (1.0 - fy)
                + sample(x0, y0 + 1) * (1.0 - fx) * fy
                + sample(x0 + 1, y0 + 1) * fx * fy;
            out[oy * side + ox] = T::of(v);
        }
    }
    let (ac, as_) = (T::of(cos.abs()), T::of(sin.abs()));
    let (tc, ts, tcen) = (T::of(cos), T::of(sin), T::of(c));
    let full = T::of(side as f64);
    let rotated = boxes
        .iter()
        .filter_map(|b| {
            let (dx, dy) = (b.cx - tcen, b.cy - tcen);
            let nb = BBox {
                cx: tcen + tc * dx - ts * dy,
                cy: tcen + ts * dx + tc * dy,
                w: b.w * ac + b.h * as_,
                h: b.w * as_ + b.h * ac,
                frame: b.frame.clone(),
            };
            nb.clipped(full, full)
        })
        .collect();
    Ok((Tensor::new(vec![1, side, side], out)?, rotated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canvas() -> Tensor<f64> {
        Tensor::from_fn(&[1, 64, 64], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    fn hip(cx: f64, cy: f64, side: f64) -> BBox<f64> {
        BBox::square(cx, cy, side, Frame::Canvas(64)).unwrap()
    }

    #[test]
    fn zeroed_config_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = canvas();
        let b = vec![hip(20.0, 30.0, 10.0), hip(44.0, 30.0, 12.0)];
        for _ in 0..20 {
            let (c2, b2, _) = augment(&c, &b, &AugmentConfig::none(), &mut rng).unwrap();
            assert_eq!(c2, c);
            assert_eq!(b2, b);
        }
    }

    #[test]
    fn three_degree_rotation_grows_square() {
        let b = vec![hip(32.0, 32.0, 20.0)];
        let (_, r) = rotate(&canvas(), &b, 3.0).unwrap();
        let factor = 3f64.to_radians().cos() + 3f64.to_radians().sin();
        assert!((r[0].w / 20.0 - factor).abs() < 1e-12);
        assert!((factor - 1.0510).abs() < 1e-4);
        assert!(r[0].is_square());
        assert!((r[0].cx - 32.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_moves_box_with_pixels() {
        // a single bright blob follows its box under rotation
        let side = 64;
        let mut c = Tensor::<f64>::zeros(&[1, side, side]);
        for y in 10..16 {
            for x in 40..46 {
                c.data_mut()[y * side + x] = 1.0;
            }
        }
        let b = vec![hip(43.0, 13.0, 6.0)];
        let (rc, rb) = rotate(&c, &b, 3.0).unwrap();
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..side {
            for x in 0..side {
                let v = rc.data()[y * side + x];
                sx += v * (x as f64 + 0.5);
                sy += v * (y as f64 + 0.5);
                m += v;
            }
        }
        assert!((sx / m - rb[0].cx).abs() < 0.2 && (sy / m - rb[0].cy).abs() < 0.2);
    }

    #[test]
    fn rotation_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = AugmentConfig::default();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| AugmentDraw::sample(&cfg, &mut rng).rotation_deg.is_some())
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.9).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn draws_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig::default();
        for _ in 0..1000 {
            let d = AugmentDraw::sample(&cfg, &mut rng);
            if let Some(a) = d.rotation_deg {
                assert!(a.abs() <= 3.0);
            }
            assert!(d.contrast >= 1.0 / 1.5 && d.contrast <= 1.5);
            assert!(d.brightness.abs() <= 0.25);
        }
    }

    #[test]
    fn lighting_stays_in_unit_range() {
        let mut c = canvas();
        apply_lighting(&mut c, 1.5, 0.25);
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn boxes_are_clipped_to_canvas() {
        let b = vec![hip(2.0, 2.0, 10.0)];
        let (_, r) = rotate(&canvas(), &b, 2.0).unwrap();
        let (x0, y0, _, _) = r[0].corners();
        assert!(x0 >= 0.0 && y0 >= 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AugmentConfig {
            rotation_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
