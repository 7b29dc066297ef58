//! Overlay rendering: ground truths in yellow, predictions in red with their
//! confidence printed beside the box.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageFormat, Rgb, RgbImage};

use super::predict::Prediction;
use crate::dataset::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

pub const GT_COLOR: [u8; 3] = [255, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const STROKE: i64 = 2;
/// Each font cell is drawn as a `GLYPH_SCALE × GLYPH_SCALE` block.
const GLYPH_SCALE: i64 = 2;

/// 3×5 bitmaps, one row per entry, most significant of the low three bits
/// on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Outline of `b` with a stroke of [`STROKE`] pixels drawn inward from the
/// rounded corners.
fn draw_box<T: Scalar>(img: &mut RgbImage, b: &BBox<T>, color: [u8; 3]) {
    let (x0, y0, x1, y1) = b.corners();
    let x0 = x0.to_f64_lossy().round() as i64;
    let y0 = y0.to_f64_lossy().round() as i64;
    let x1 = x1.to_f64_lossy().round() as i64 - 1;
    let y1 = y1.to_f64_lossy().round() as i64 - 1;
    for t in 0..STROKE {
        for x in x0..=x1 {
            put(img, x, y0 + t, color);
            put(img, x, y1 - t, color);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, color);
            put(img, x1 - t, y, color);
        }
    }
}

/// Draw `text` with its top-left corner at `(x, y)`; unknown characters
/// leave a blank cell.
fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, color: [u8; 3]) {
    let advance = 4 * GLYPH_SCALE;
    for (k, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let ox = x + k as i64 * advance;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        put(img, ox + col * GLYPH_SCALE + dx, y + r as i64 * GLYPH_SCALE + dy, color);
                    }
                }
            }
        }
    }
}

/// Render the overlay in memory. Boxes are in the image's original frame.
pub fn overlay_image<T: Scalar>(image: &GrayImage, gts: &[BBox<T>], preds: &[Prediction<T>]) -> RgbImage {
    let mut img = RgbImage::from_fn(image.width, image.height, |x, y| {
        let v = image.get(x, y);
        Rgb([v, v, v])
    });
    for b in gts {
        draw_box(&mut img, b, GT_COLOR);
    }
    let text_h = 5 * GLYPH_SCALE;
    for p in preds {
        draw_box(&mut img, &p.bbox, PRED_COLOR);
        let (x0, y0, _, y1) = p.bbox.corners();
        let x = x0.to_f64_lossy().round() as i64;
        let above = y0.to_f64_lossy().round() as i64 - text_h - 2;
        let y = if above >= 0 {
            above
        } else {
            y1.to_f64_lossy().round() as i64 + 2
        };
        draw_text(&mut img, &format!("{:.2}", p.confidence.to_f64_lossy()), x, y, PRED_COLOR);
    }
    img
}

/// Render and write the overlay: binary PPM when the extension is `ppm`,
/// PNG otherwise.
pub fn render_overlay<T: Scalar>(
    image: &GrayImage,
    gts: &[BBox<T>],
    preds: &[Prediction<T>],
    path: &Path,
) -> Result<()> {
    let img = overlay_image(image, gts, preds);
    let mut buf = std::io::Cursor::new(Vec::new());
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => {
            let enc = PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
            img.write_with_encoder(enc)?;
        }
        _ => img.write_to(&mut buf, ImageFormat::Png)?,
    }
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;

    fn sq(cx: f64, cy: f64, s: f64) -> BBox<f64> {
        BBox::square(cx, cy, s, Frame::original("a")).unwrap()
    }

    /// FNV-1a of the PPM written by `written_files_are_deterministic`.
    const GOLDEN_PPM_FNV: u64 = 0x1150_113e_df75_9b5a;

    fn count(img: &RgbImage, c: [u8; 3]) -> usize {
        img.pixels().filter(|p| p.0 == c).count()
    }

    #[test]
    fn ground_truth_only_has_no_red() {
        let g = GrayImage::filled(64, 48, 40);
        let img = overlay_image::<f64>(&g, &[sq(20.0, 20.0, 16.0)], &[]);
        assert_eq!(count(&img, PRED_COLOR), 0);
        // a 16-px square with a 2-px stroke
        assert_eq!(count(&img, GT_COLOR), 16 * 16 - 12 * 12);
    }

    #[test]
    fn identical_prediction_covers_the_ground_truth() {
        let g = GrayImage::filled(80, 80, 0);
        let b = sq(40.0, 40.0, 20.0);
        let p = Prediction {
            bbox: b.clone(),
            confidence: 0.97,
            anchor: 0,
        };
        let img = overlay_image(&g, &[b], &[p]);
        assert_eq!(count(&img, GT_COLOR), 0);
        let band = 20 * 20 - 16 * 16;
        let red = count(&img, PRED_COLOR);
        // stroke plus the printed "0.97"
        assert!(red > band, "{red}");
        for y in 30..50u32 {
            for x in 30..50u32 {
                let inside = (32..48).contains(&x) && (32..48).contains(&y);
                assert_eq!(img.get_pixel(x, y).0 == PRED_COLOR, !inside, "({x}, {y})");
            }
        }
    }

    #[test]
    fn written_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrayImage::new(32, 32, (0..1024).map(|i| (i % 251) as u8).collect()).unwrap();
        let p = Prediction {
            bbox: sq(12.0, 18.0, 10.0),
            confidence: 0.5,
            anchor: 3,
        };
        let mut bytes = Vec::new();
        for name in ["a.ppm", "b.ppm", "c.png"] {
            let path = dir.path().join(name);
            render_overlay(&g, &[sq(16.0, 16.0, 12.0)], &[p.clone()], &path).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        assert!(bytes[0].starts_with(b"P6"));
        let fnv = bytes[0]
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        assert_eq!(fnv, GOLDEN_PPM_FNV, "{fnv:#x}");
        assert!(bytes[2].starts_with(b"\x89PNG"));
        assert!(render_overlay(&g, &[], &[p], &dir.path().join("no/such/dir.png")).is_err());
    }
}
