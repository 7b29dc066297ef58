//! Synthetic pelvic phantoms: a smooth background with a pelvic ring, two
//! femoral shafts and two bright disks standing in for the femoral heads.
//!
//! Each phantom is a pure function of `(config, index)`; phantom `i` draws
//! from ChaCha stream `i` of the configured seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{AnnotationDocument, ImageRecord, Roi};
use super::raster::GrayImage;
use crate::error::{Error, Result};

/// Ground-truth square side relative to the disk diameter.
pub const LOOSE_FIT: f64 = 1.2;

const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub canvas_long_side: u32,
    /// Width / height interval.
    pub aspect_range: (f64, f64),
    pub roi_ratio_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise, in gray levels.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            canvas_long_side: 512,
            aspect_range: (0.8, 1.3),
            roi_ratio_range: (0.10, 0.30),
            noise_level: 8.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (rlo, rhi) = self.roi_ratio_range;
        let (alo, ahi) = self.aspect_range;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if !(rlo > 0.0 && rlo <= rhi && rhi < 1.0) {
            return bad("roi_ratio_range must lie inside (0, 1)");
        }
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return bad("aspect_range must be a positive interval");
        }
        if self.canvas_long_side < 16 {
            return bad("canvas_long_side must be at least 16");
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad("noise_level must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Disk {
    cx: f64,
    cy: f64,
    radius: f64,
    brightness: f64,
}

struct Layout {
    width: u32,
    height: u32,
    disks: [Disk; 2],
    sides: [f64; 2],
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn layout<R: Rng>(cfg: &PhantomConfig, rng: &mut R, index: usize) -> Result<Layout> {
    let long = cfg.canvas_long_side as f64;
    let aspect = uniform(rng, cfg.aspect_range.0, cfg.aspect_range.1);
    let (width, height) = if aspect >= 1.0 {
        (cfg.canvas_long_side, ((long / aspect).round() as u32).max(1))
    } else {
        (((long * aspect).round() as u32).max(1), cfg.canvas_long_side)
    };
    let (w, h) = (width as f64, height as f64);
    let long = w.max(h);
    // keep sampled ratios strictly inside the configured band
    let eps = 1e-9;
    let (rlo, rhi) = (cfg.roi_ratio_range.0 + eps, cfg.roi_ratio_range.1 - eps);
    for _ in 0..MAX_PLACEMENT_TRIES {
        let r0 = uniform(rng, rlo, rhi);
        let r1 = (r0 * uniform(rng, 0.93, 1.07)).clamp(rlo, rhi);
        let sides = [r0 * long, r1 * long];
        let mid = w / 2.0;
        let gap = 0.02 * w;
        let cy0 = uniform(rng, 0.4 * h, 0.7 * h);
        let cy1 = cy0 + uniform(rng, -0.04, 0.04) * h;
        let lx = uniform(rng, sides[0] / 2.0, mid - gap / 2.0 - sides[0] / 2.0);
        let rx = uniform(rng, mid + gap / 2.0 + sides[1] / 2.0, w - sides[1] / 2.0);
        let centers = [(lx, cy0), (rx, cy1)];
        let fits = centers.iter().zip(&sides).all(|(&(x, y), &s)| {
            x - s / 2.0 >= 0.0 && x + s / 2.0 <= w && y - s / 2.0 >= 0.0 && y + s / 2.0 <= h
        });
        let apart = centers[0].0 + sides[0] / 2.0 < centers[1].0 - sides[1] / 2.0;
        if !(fits && apart && lx < mid && rx > mid) {
            continue;
        }
        let disk = |k: usize, rng: &mut R| Disk {
            cx: centers[k].0,
            cy: centers[k].1,
            radius: sides[k] / LOOSE_FIT / 2.0,
            brightness: uniform(rng, 170.0, 225.0),
        };
        let disks = [disk(0, rng), disk(1, rng)];
        return Ok(Layout {
            width,
            height,
            disks,
            sides,
        });
    }
    Err(Error::Infeasible(format!(
        "phantom {index}: no non-overlapping placement after {MAX_PLACEMENT_TRIES} tries"
    )))
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render<R: Rng>(cfg: &PhantomConfig, lay: &Layout, rng: &mut R) -> GrayImage {
    let (w, h) = (lay.width as usize, lay.height as usize);
    let (wf, hf) = (w as f64, h as f64);
    let base = uniform(rng, 35.0, 70.0);
    let gx = uniform(rng, -20.0, 20.0);
    let gy = uniform(rng, -20.0, 20.0);
    // pelvic ring
    let ring_cx = wf / 2.0 + uniform(rng, -0.03, 0.03) * wf;
    let ring_cy = (lay.disks[0].cy + lay.disks[1].cy) / 2.0 - uniform(rng, 0.15, 0.25) * hf;
    let ring_rx = (lay.disks[1].cx - lay.disks[0].cx) / 2.0 * uniform(rng, 0.85, 1.05);
    let ring_ry = ring_rx * uniform(rng, 0.55, 0.8);
    let ring_width = uniform(rng, 0.06, 0.12);
    let ring_gain = uniform(rng, 35.0, 60.0);
    // femoral shafts leave each head downward and slightly outward
    let shaft_gain = uniform(rng, 50.0, 80.0);
    let shafts: Vec<(f64, f64, f64, f64)> = lay
        .disks
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let out = if k == 0 { -1.0 } else { 1.0 };
            let dx = out * uniform(rng, 0.15, 0.35);
            let norm = (dx * dx + 1.0).sqrt();
            (d.cx, d.cy, dx / norm, 1.0 / norm)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_level.max(1e-12)).expect("finite stddev");

    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut v = base + gx * (px / wf - 0.5) + gy * (py / hf - 0.5);
            let er = (((px - ring_cx) / ring_rx).powi(2) + ((py - ring_cy) / ring_ry).powi(2)).sqrt();
            v += ring_gain * (1.0 - smoothstep(0.0, ring_width, (er - 1.0).abs()));
            for (d, &(sx, sy, ux, uy)) in lay.disks.iter().zip(&shafts) {
                let (rx, ry) = (px - sx, py - sy);
                let along = rx * ux + ry * uy;
                if along > 0.0 {
                    let across = (rx * uy - ry * ux).abs();
                    let half = d.radius * 0.6;
                    v += shaft_gain * (1.0 - smoothstep(half * 0.8, half * 1.2, across));
                }
            }
            for d in &lay.disks {
                let r = ((px - d.cx).powi(2) + (py - d.cy).powi(2)).sqrt();
                let edge = (0.04 * d.radius).max(0.75);
                let inside = 1.0 - smoothstep(d.radius - edge, d.radius + edge, r);
                if inside > 0.0 {
                    v = v * (1.0 - inside) + d.brightness * inside;
                }
            }
            if cfg.noise_level > 0.0 {
                v += noise.sample(rng);
            }
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage {
        width: lay.width,
        height: lay.height,
        pixels,
    }
}

/// Generate phantom `index` of the configured stream.
pub fn synth_one(cfg: &PhantomConfig, index: usize) -> Result<(GrayImage, ImageRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let lay = layout(cfg, &mut rng, index)?;
    let img = render(cfg, &lay, &mut rng);
    let id = format!("phantom_{index:05}");
    let rois = lay
        .disks
        .iter()
        .zip(&lay.sides)
        .map(|(d, &side)| Roi {
            label: "hip".into(),
            cx: d.cx,
            cy: d.cy,
            side,
        })
        .collect();
    let rec = ImageRecord {
        file: format!("{id}.png"),
        id,
        width: lay.width,
        height: lay.height,
        rois,
    };
    Ok((img, rec))
}

/// Generate `n` phantoms starting at stream `first`.
pub fn synth_range(
    cfg: &PhantomConfig,
    first: usize,
    n: usize,
) -> Result<(Vec<GrayImage>, AnnotationDocument)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("phantom count must be at least 1".into()));
    }
    let mut images = Vec::with_capacity(n);
    let mut doc = AnnotationDocument::default();
    for i in first..first + n {
        let (img, rec) = synth_one(cfg, i)?;
        images.push(img);
        doc.images.push(rec);
    }
    Ok((images, doc))
}

pub fn synth_generate(
    cfg: &PhantomConfig,
    n: usize,
) -> Result<(Vec<GrayImage>, AnnotationDocument)> {
    synth_range(cfg, 0, n)
}
