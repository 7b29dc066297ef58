//! Anchor-design experiment grid: one fresh model per row, trained under a
//! shared budget and reported on validation and test data.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{report, report_table, MetricsReport};
use super::predict::{predict_canvases, PredictConfig, Prediction};
use crate::anchors::{AnchorDesign, ScaleSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nnet::{build_detector, DetectorConfig, Tensor};
use crate::scalar::Scalar;
use crate::training::{train, Sample, TrainConfig, TrainOutcome};

/// One row of a grid file: a named layer list and scale range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub name: String,
    pub layers: Vec<usize>,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridRow {
    pub fn design(&self) -> Result<AnchorDesign> {
        let d = AnchorDesign::new(self.layers.clone(), ScaleSpec::new(self.start, self.stop, self.step)?);
        d.layers.validate()?;
        d.scales.count()?;
        Ok(d)
    }

    pub fn total_anchors(&self) -> Result<usize> {
        let d = self.design()?;
        Ok(d.layers.total(d.scales.count()?))
    }
}

/// Parse a JSON list of rows; every row's design is validated up front.
pub fn parse_grid(text: &str) -> Result<Vec<GridRow>> {
    let rows: Vec<GridRow> = serde_json::from_str(text)?;
    if rows.is_empty() {
        return Err(Error::Empty("experiment grid has no rows"));
    }
    for r in &rows {
        r.design().map_err(|e| Error::GridRow {
            row: r.name.clone(),
            source: Box::new(e),
        })?;
    }
    Ok(rows)
}

pub fn load_grid(path: &Path) -> Result<Vec<GridRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}

/// Settings shared by every row. The backbone comes from `detector`; its
/// head grids and anchors per cell are replaced per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GridBudget {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub name: String,
    pub layers: Vec<usize>,
    pub scales: ScaleSpec<f64>,
    pub total_anchors: usize,
    /// Absent when training held out no validation images.
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
}

/// Canvas-frame report of `model` over `samples`.
pub fn report_samples<T: Scalar>(
    predictions: &[Vec<Prediction<T>>],
    samples: &[&Sample<T>],
) -> Result<MetricsReport> {
    let gts: Vec<Vec<BBox<T>>> = samples.iter().map(|s| s.boxes.clone()).collect();
    report(predictions, &gts)
}

fn evaluate<T: Scalar>(
    outcome: &TrainOutcome<T>,
    design: &AnchorDesign,
    samples: &[&Sample<T>],
    cfg: &PredictConfig,
    batch_size: usize,
) -> Result<MetricsReport> {
    let anchors = design.build::<T>()?;
    let canvases: Vec<&Tensor<T>> = samples.iter().map(|s| &s.canvas).collect();
    let preds = predict_canvases(&outcome.model, &canvases, &anchors, cfg, batch_size)?;
    report_samples(&preds, samples)
}

/// Train and report a single row. Returns the trained outcome as well.
pub fn run_grid_row<T: Scalar>(
    row: &GridRow,
    samples: &[Sample<T>],
    test: &[Sample<T>],
    budget: &GridBudget,
) -> Result<(GridResult, TrainOutcome<T>)> {
    let design = row.design()?;
    let anchors = design.build::<T>()?;
    let detector = DetectorConfig {
        head_grids: row.layers.clone(),
        anchors_per_cell: design.anchors_per_cell()?,
        ..budget.detector.clone()
    };
    let model = build_detector::<T>(&detector, budget.seed)?;
    let outcome = train(model, samples, &anchors, &budget.train, budget.seed)?;
    let bs = budget.train.optimizer.batch_size;
    let val: Vec<&Sample<T>> = samples
        .iter()
        .filter(|s| outcome.val_ids.contains(&s.id))
        .collect();
    let validation = if val.is_empty() {
        None
    } else {
        Some(evaluate(&outcome, &design, &val, &budget.predict, bs)?)
    };
    let test_refs: Vec<&Sample<T>> = test.iter().collect();
    let test_report = evaluate(&outcome, &design, &test_refs, &budget.predict, bs)?;
    let result = GridResult {
        name: row.name.clone(),
        layers: row.layers.clone(),
        scales: design.scales,
        total_anchors: anchors.total(),
        validation,
        test: test_report,
    };
    Ok((result, outcome))
}

/// Run every row in order with the same seed. A failing row aborts the grid
/// with its name attached.
pub fn run_experiment_grid<T: Scalar>(
    rows: &[GridRow],
    samples: &[Sample<T>],
    test: &[Sample<T>],
    budget: &GridBudget,
) -> Result<Vec<GridResult>> {
    rows.iter()
        .map(|r| {
            run_grid_row(r, samples, test, budget)
                .map(|(res, _)| res)
                .map_err(|e| Error::GridRow {
                    row: r.name.clone(),
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Metrics table with a validation and a test line per row, preceded by the
/// anchor count of every row.
pub fn grid_table(results: &[GridResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{}: layers {:?}, scales range({}, {}, {}), {} anchors",
            r.name, r.layers, r.scales.start, r.scales.stop, r.scales.step, r.total_anchors
        );
    }
    let names: Vec<(String, &MetricsReport)> = results
        .iter()
        .flat_map(|r| {
            let mut v = Vec::new();
            if let Some(val) = &r.validation {
                v.push((format!("{} val", r.name), val));
            }
            v.push((format!("{} test", r.name), &r.test));
            v
        })
        .collect();
    let rows: Vec<(&str, &MetricsReport)> = names.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    s.push('\n');
    s.push_str(&report_table(&rows));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = r#"[
        {"name": "Exp1", "layers": [4, 2, 1], "start": 0.7, "stop": 1.3, "step": 0.3},
        {"name": "Exp2", "layers": [7], "start": 0.7, "stop": 2.2, "step": 0.75},
        {"name": "Exp3", "layers": [7], "start": 0.7, "stop": 2.2, "step": 0.3},
        {"name": "Exp4", "layers": [7], "start": 0.7, "stop": 2.2, "step": 0.1},
        {"name": "Exp5", "layers": [7], "start": 0.7, "stop": 2.2, "step": 0.05},
        {"name": "Exp6", "layers": [14], "start": 0.7, "stop": 2.2, "step": 0.05}
    ]"#;

    #[test]
    fn parses_and_counts_anchors() {
        let rows = parse_grid(TABLE).unwrap();
        let counts: Vec<usize> = rows.iter().map(|r| r.total_anchors().unwrap()).collect();
        assert_eq!(counts, vec![63, 147, 294, 784, 1519, 6076]);
    }

    #[test]
    fn bad_rows_are_named() {
        let text = r#"[{"name": "odd", "layers": [7], "start": 0.7, "stop": 2.0, "step": 0.3}]"#;
        match parse_grid(text) {
            Err(Error::GridRow { row, .. }) => assert_eq!(row, "odd"),
            other => panic!("{other:?}"),
        }
        assert!(parse_grid("[]").is_err());
        assert!(parse_grid(r#"[{"name": "x", "layers": [7]}]"#).is_err());
    }
}
