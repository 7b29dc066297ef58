//! The JSON annotation document exchanged between the labeling UI, dataset
//! ingestion and training.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Frame};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDocument {
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Image path, relative to the annotation file's directory unless absolute.
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub rois: Vec<Roi>,
}

/// Square ROI in original pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub label: String,
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl Roi {
    pub fn to_box<T: Scalar>(&self, image_id: &str) -> Result<BBox<T>> {
        BBox::square(
            T::of(self.cx),
            T::of(self.cy),
            T::of(self.side),
            Frame::original(image_id),
        )
    }
}

impl ImageRecord {
    pub fn long_side(&self) -> u32 {
        self.width.max(self.height)
    }

    pub fn boxes<T: Scalar>(&self) -> Result<Vec<BBox<T>>> {
        self.rois.iter().map(|r| r.to_box(&self.id)).collect()
    }

    pub fn resolve_file(&self, base_dir: &Path) -> PathBuf {
        let p = Path::new(&self.file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

impl AnnotationDocument {
    pub fn n_rois(&self) -> usize {
        self.images.iter().map(|i| i.rois.len()).sum()
    }

    /// All invariant breaches, each naming the offending image.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                out.push(format!("image '{}': duplicate id", img.id));
            }
            if img.width == 0 || img.height == 0 {
                out.push(format!(
                    "image '{}': zero dimension {}x{}",
                    img.id, img.width, img.height
                ));
            }
            for (k, r) in img.rois.iter().enumerate() {
                if !(r.side.is_finite() && r.side > 0.0) {
                    out.push(format!(
                        "image '{}': roi {k} has nonpositive side {}",
                        img.id, r.side
                    ));
                }
                let inside = |v: f64, hi: u32| v.is_finite() && v >= 0.0 && v <= hi as f64;
                if !inside(r.cx, img.width) || !inside(r.cy, img.height) {
                    out.push(format!(
                        "image '{}': roi {k} center ({}, {}) outside {}x{}",
                        img.id, r.cx, r.cy, img.width, img.height
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let doc: AnnotationDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Read and validate an annotation file.
/// Read every image of `doc`, resolving relative files against `base_dir`,
/// and check each raster against its recorded size.
pub fn load_images(doc: &AnnotationDocument, base_dir: &Path) -> Result<Vec<GrayImage>> {
    doc.images
        .iter()
        .map(|rec| {
            let img = GrayImage::load(&rec.resolve_file(base_dir))?;
            if (img.width, img.height) != (rec.width, rec.height) {
                return Err(Error::Validation(vec![format!(
                    "image '{}': file is {}x{}, annotation says {}x{}",
                    rec.id, img.width, img.height, rec.width, rec.height
                )]));
            }
            Ok(img)
        })
        .collect()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationDocument> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationDocument::parse(&text, path)
}
