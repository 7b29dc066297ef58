//! 8-bit grayscale rasters, file IO and canvas preprocessing.

use std::path::Path;

use image::{ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::geometry::{make_transform, PadResizeTransform};
use crate::nnet::Tensor;
use crate::scalar::Scalar;

/// Default canvas side.
pub const CANVAS_SIDE: u32 = 224;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidDimension(format!(
                "{}x{} raster needs {} pixels, got {}",
                width,
                height,
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, v: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![v; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Read a PNG or PGM file, converting to 8-bit luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        GrayImage::new(w, h, img.into_raw())
    }

    /// Write as PNG, or binary PGM when the extension is `pgm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: image::ImageBuffer<Luma<u8>, &[u8]> =
            image::ImageBuffer::from_raw(self.width, self.height, self.pixels.as_slice())
                .ok_or_else(|| Error::InvalidDimension("raster buffer".into()))?;
        let fmt = match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => ImageFormat::Pnm,
            _ => ImageFormat::Png,
        };
        buf.save_with_format(path, fmt)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let buf: image::ImageBuffer<Luma<u8>, &[u8]> =
            image::ImageBuffer::from_raw(self.width, self.height, self.pixels.as_slice())
                .ok_or_else(|| Error::InvalidDimension("raster buffer".into()))?;
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Per-output-pixel source contributions along one axis.
///
/// Output pixel `o` covers `[o·square, (o+1)·square)` and source pixel `u`
/// of the padded square covers `[u·target, (u+1)·target)`, both in units of
/// `1/target` square pixels, so overlaps are exact integers.
fn axis_weights(orig: u32, pad: u32, square: u32, target: u32) -> Vec<Vec<(usize, f64)>> {
    let (sq, tg) = (square as u64, target as u64);
    (0..tg)
        .map(|o| {
            let lo = o * sq;
            let hi = lo + sq;
            let first = lo / tg;
            let last = (hi - 1) / tg;
            (first..=last)
                .filter_map(|u| {
                    let u0 = u * tg;
                    let overlap = hi.min(u0 + tg) - lo.max(u0);
                    let src = u.checked_sub(pad as u64)?;
                    (src < orig as u64 && overlap > 0)
                        .then(|| (src as usize, overlap as f64 / sq as f64))
                })
                .collect()
        })
        .collect()
}

/// Pad to a centered square, area-resample to `target × target` and scale to
/// `[0, 1]`. Returns the `[1, target, target]` canvas and its transform.
pub fn preprocess<T: Scalar>(
    image: &GrayImage,
    target: u32,
) -> Result<(Tensor<T>, PadResizeTransform)> {
    if image.is_empty() || image.pixels.is_empty() {
        return Err(Error::Empty("preprocess of an empty raster"));
    }
    let t = make_transform(image.width, image.height, target)?;
    let side = target as usize;
    let (w, h) = (image.width as usize, image.height as usize);
    let xw = axis_weights(image.width, t.pad_left, t.square_side, target);
    let yw = axis_weights(image.height, t.pad_top, t.square_side, target);

    // horizontal pass over every source row
    let mut rows = vec![0.0f64; h * side];
    for y in 0..h {
        let src = &image.pixels[y * w..(y + 1) * w];
        let dst = &mut rows[y * side..(y + 1) * side];
        for (o, taps) in xw.iter().enumerate() {
            dst[o] = taps.iter().map(|&(u, wt)| wt * src[u] as f64).sum();
        }
    }
    let mut out = vec![T::zero(); side * side];
    for (oy, taps) in yw.iter().enumerate() {
        if taps.is_empty() {
            continue;
        }
        for ox in 0..side {
            let v: f64 = taps.iter().map(|&(r, wt)| wt * rows[r * side + ox]).sum();
            out[oy * side + ox] = T::of(v / 255.0);
        }
    }
    Ok((Tensor::new(vec![1, side, side], out)?, t))
}

/// Quantize a `[1, S, S]` (or `[S, S]`) canvas in `[0, 1]` back to 8 bits.
pub fn canvas_to_image<T: Scalar>(canvas: &Tensor<T>) -> Result<GrayImage> {
    let shape = canvas.shape();
    let (h, w) = match shape {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape("canvas_to_image", format!("{shape:?}"))),
    };
    let pixels = canvas
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::new(w as u32, h as u32, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Direction, Frame};

    fn gradient(w: u32, h: u32) -> GrayImage {
        let px = (0..w * h).map(|i| ((i * 7 + i / w) % 251) as u8).collect();
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn square_input_at_target_is_only_rescaled() {
        let img = gradient(224, 224);
        let (c, t) = preprocess::<f64>(&img, 224).unwrap();
        assert!(t.is_identity());
        for (v, p) in c.data().iter().zip(&img.pixels) {
            assert_eq!(*v, *p as f64 / 255.0);
        }
    }

    #[test]
    fn padding_bands_are_exactly_zero() {
        let img = GrayImage::filled(800, 1000, 200);
        let (c, _) = preprocess::<f64>(&img, 224).unwrap();
        let at = |x: usize, y: usize| c.data()[y * 224 + x];
        for y in 0..224 {
            for x in (0..22).chain(202..224) {
                assert_eq!(at(x, y), 0.0, "({x},{y})");
            }
            assert!(at(22, y) > 0.0 && at(201, y) > 0.0);
            assert!((at(100, y) - 200.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn white_image_mean_is_area_fraction() {
        for (w, h) in [(800, 1000), (1000, 800), (333, 120)] {
            let img = GrayImage::filled(w, h, 255);
            let (c, _) = preprocess::<f64>(&img, 224).unwrap();
            let mean = c.data().iter().sum::<f64>() / c.numel() as f64;
            let want = (w * h) as f64 / (w.max(h) as f64).powi(2);
            assert!((mean - want).abs() < 0.01, "{mean} vs {want}");
        }
    }

    #[test]
    fn upsampling_small_images() {
        let img = GrayImage::filled(50, 100, 255);
        let (c, t) = preprocess::<f32>(&img, 224).unwrap();
        assert_eq!(t.pad_left, 25);
        let mean = c.data().iter().map(|&v| v as f64).sum::<f64>() / c.numel() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn empty_raster_rejected() {
        let img = GrayImage {
            width: 0,
            height: 0,
            pixels: vec![],
        };
        assert!(preprocess::<f64>(&img, 224).is_err());
    }

    #[test]
    fn inverse_mapping_recovers_roi_within_a_pixel() {
        let img = gradient(640, 480);
        let (_, t) = preprocess::<f64>(&img, 224).unwrap();
        let t = t.for_image("g");
        for side in [8.0, 30.0, 150.0] {
            let b = BBox::square(123.0, 321.0, side, Frame::original("g")).unwrap();
            let c = t.map_box(&b, Direction::Forward).unwrap();
            // canvas boxes are stored at raster precision (1/100 px)
            let q = |v: f64| (v * 100.0).round() / 100.0;
            let c = BBox::new(q(c.cx), q(c.cy), q(c.w), q(c.h), c.frame).unwrap();
            let back = t.map_box(&c, Direction::Inverse).unwrap();
            assert!((back.cx - b.cx).abs() < 1.0 && (back.w - b.w).abs() < 1.0);
        }
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(17, 9);
        for name in ["x.png", "x.pgm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(GrayImage::load(&p).unwrap(), img);
        }
    }
}
