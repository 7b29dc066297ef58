//! Image-size and ROI-ratio statistics used to drive anchor design.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::annotation::AnnotationDocument;
use crate::error::{Error, Result};

/// Bin width of the ratio histogram over `(0, 1]`.
pub const RATIO_BIN_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max: f64,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single value).
    pub stddev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("summary of an empty list"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Summary {
            max: sorted[n - 1],
            min: sorted[0],
            median,
            mean,
            stddev,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges; bins are `(lo, hi]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of_ratios(ratios: &[f64]) -> Self {
        let nbins = (1.0 / RATIO_BIN_WIDTH).round() as usize;
        let edges: Vec<f64> = (0..=nbins).map(|i| i as f64 / nbins as f64).collect();
        let mut counts = vec![0; nbins];
        for &r in ratios {
            let bin = edges.partition_point(|&e| e < r).clamp(1, nbins) - 1;
            counts[bin] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_rois: usize,
    pub long_side_summary: Summary,
    pub roi_ratio_summary: Option<Summary>,
    pub roi_ratio_histogram: Histogram,
    /// Raw per-image long sides, in document order.
    pub long_sides: Vec<f64>,
    /// Raw per-ROI `side / long side` ratios, in document order.
    pub ratios: Vec<f64>,
}

pub fn compute_stats(doc: &AnnotationDocument) -> Result<DatasetStats> {
    if doc.images.is_empty() {
        return Err(Error::Empty("annotation document has no images"));
    }
    let long_sides: Vec<f64> = doc.images.iter().map(|i| i.long_side() as f64).collect();
    let ratios: Vec<f64> = doc
        .images
        .iter()
        .flat_map(|img| {
            let long = img.long_side() as f64;
            img.rois.iter().map(move |r| r.side / long)
        })
        .collect();
    Ok(DatasetStats {
        n_images: doc.images.len(),
        n_rois: ratios.len(),
        long_side_summary: Summary::of(&long_sides)?,
        roi_ratio_summary: Summary::of(&ratios).ok(),
        roi_ratio_histogram: Histogram::of_ratios(&ratios),
        long_sides,
        ratios,
    })
}

impl DatasetStats {
    /// Plain-text report with the long-side summary and the ratio histogram.
    pub fn text_table(&self) -> String {
        let s = &self.long_side_summary;
        let mut out = String::new();
        let _ = writeln!(out, "images {}  rois {}", self.n_images, self.n_rois);
        let _ = writeln!(
            out,
            "long side (px)  max {:.0}  min {:.0}  median {:.1}  mean {:.1}  std {:.1}",
            s.max, s.min, s.median, s.mean, s.stddev
        );
        let _ = writeln!(out, "{:>13}  {:>6}  ", "ratio bin", "count");
        let peak = self.roi_ratio_histogram.counts.iter().copied().max().unwrap_or(0);
        let h = &self.roi_ratio_histogram;
        for (i, &c) in h.counts.iter().enumerate() {
            let bar = if peak > 0 { c * 40 / peak } else { 0 };
            let _ = writeln!(
                out,
                "({:.2}, {:.2}]  {:>6}  {}",
                h.edges[i],
                h.edges[i + 1],
                c,
                "#".repeat(bar)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::annotation::{ImageRecord, Roi};
    use proptest::prelude::*;

    fn image(id: &str, w: u32, h: u32, sides: &[f64]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            file: format!("{id}.png"),
            width: w,
            height: h,
            rois: sides
                .iter()
                .map(|&side| Roi {
                    label: "hip".into(),
                    cx: w as f64 / 2.0,
                    cy: h as f64 / 2.0,
                    side,
                })
                .collect(),
        }
    }

    #[test]
    fn ratio_uses_long_side() {
        let doc = AnnotationDocument {
            images: vec![image("a", 1000, 800, &[200.0, 1000.0])],
        };
        let st = compute_stats(&doc).unwrap();
        assert_eq!(st.ratios, vec![0.2, 1.0]);
        assert_eq!(st.roi_ratio_histogram.counts[3], 1);
        assert_eq!(st.roi_ratio_histogram.counts[19], 1);
    }

    #[test]
    fn long_side_summary_fixture() {
        // long sides are the max/min/median triple of a published dataset table
        let doc = AnnotationDocument {
            images: vec![
                image("a", 4280, 3000, &[]),
                image("b", 1200, 1616, &[]),
                image("c", 2688, 2000, &[]),
            ],
        };
        let st = compute_stats(&doc).unwrap();
        let s = &st.long_side_summary;
        assert_eq!((s.max, s.min, s.median), (4280.0, 1616.0, 2688.0));
        assert!(st.roi_ratio_summary.is_none());
        assert_eq!(st.n_rois, 0);
    }

    #[test]
    fn empty_document_is_an_error() {
        assert!(matches!(
            compute_stats(&AnnotationDocument::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn text_table_lists_every_bin() {
        let doc = AnnotationDocument {
            images: vec![image("a", 500, 400, &[100.0])],
        };
        let t = compute_stats(&doc).unwrap().text_table();
        assert_eq!(t.lines().count(), 3 + 20);
        assert!(t.contains("(0.15, 0.20]       1"));
    }

    proptest! {
        #[test]
        fn summary_matches_naive_recomputation(vals in prop::collection::vec(1.0..5000.0f64, 1..60)) {
            let s = Summary::of(&vals).unwrap();
            let mut v = vals.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let mean: f64 = vals.iter().sum::<f64>() / n as f64;
            prop_assert_eq!(s.max, v[n - 1]);
            prop_assert_eq!(s.min, v[0]);
            prop_assert_eq!(s.mean, mean);
            let med = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
            prop_assert_eq!(s.median, med);
        }

        #[test]
        fn histogram_counts_every_ratio(vals in prop::collection::vec(0.0001..=1.0f64, 0..80)) {
            let h = Histogram::of_ratios(&vals);
            prop_assert_eq!(h.counts.iter().sum::<usize>(), vals.len());
            for &r in &vals {
                let i = h.edges.windows(2).position(|e| r > e[0] && r <= e[1]);
                prop_assert!(i.is_some());
            }
        }
    }
}
