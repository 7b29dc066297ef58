//! Prediction decoding, metrics, the experiment grid and overlay rendering.

pub mod grid;
pub mod metrics;
pub mod overlay;
pub mod predict;

pub use grid::{
    grid_table, load_grid, parse_grid, report_samples, run_experiment_grid, run_grid_row, GridBudget,
    GridResult, GridRow,
};
pub use metrics::{
    ap50, average_precision, match_for_metrics, ranked_flags, report, report_table, MetricMatch,
    MetricsReport,
};
pub use overlay::{overlay_image, render_overlay};
pub use predict::{
    decode_predictions, nms, predict, predict_canvases, stack_canvases, to_original, PredictConfig,
    Prediction,
};
