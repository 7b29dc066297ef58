//! Command-line front end. Every command is a short composition of library
//! operations; artifacts land under `--out` with fixed file names.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod serve;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::anchors::{
    design_report, ratio_range, recommend_scales, AnchorDesign, AnchorDesignReport, AnchorLayerSpec,
    ScaleSpec, DEFAULT_MARGIN,
};
use crate::dataset::{
    compute_stats, load_annotations, load_images, synth_range, AnnotationDocument, GrayImage,
    PhantomConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    grid_table, load_grid, predict, render_overlay, report, report_table, run_experiment_grid,
    GridBudget, PredictConfig, Prediction,
};
use crate::geometry::BBox;
use crate::nnet::{build_detector, load_checkpoint, save_checkpoint, DetectorConfig, DetectorModel};
use crate::training::{history_csv, prepare_samples, train_with_progress, TrainConfig};

/// File names written under `--out`.
pub mod artifacts {
    pub const STATS_JSON: &str = "stats.json";
    pub const STATS_TXT: &str = "stats.txt";
    pub const ANCHORS_JSON: &str = "anchors.json";
    pub const ANNOTATIONS_JSON: &str = "annotations.json";
    pub const IMAGES_DIR: &str = "images";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const HISTORY_CSV: &str = "history.csv";
    pub const SPLIT_JSON: &str = "split.json";
    pub const TRAIN_CONFIG_JSON: &str = "train_config.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const PREDICTIONS_JSON: &str = "predictions.json";
    pub const GRID_JSON: &str = "grid.json";
    pub const GRID_TXT: &str = "grid.txt";
    pub const OVERLAYS_DIR: &str = "overlays";
}

#[derive(Debug, Parser)]
#[command(name = "roidet", version, about = "Single-shot ROI detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Run {
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation and rendering; training always runs on
    /// one thread.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
}

impl Run {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Args)]
pub struct Anchors {
    /// Anchor design JSON as written by `design-anchors`.
    #[arg(long, conflicts_with_all = ["layers", "start", "stop", "step"])]
    pub anchors: Option<PathBuf>,
    /// Grid sizes of the predictor layers.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 0.7)]
    pub start: f64,
    #[arg(long, default_value_t = 2.2)]
    pub stop: f64,
    #[arg(long, default_value_t = 0.3)]
    pub step: f64,
}

impl Anchors {
    fn design(&self) -> Result<AnchorDesign> {
        match &self.anchors {
            Some(p) => read_json::<AnchorDesignReport>(p)?.design(),
            None => {
                let d = AnchorDesign::new(self.layers.clone(), ScaleSpec::new(self.start, self.stop, self.step)?);
                d.layers.validate()?;
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Training {
    /// Training configuration JSON; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backbone configuration JSON; head grids follow the anchor design.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Epochs per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Training {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = &self.epochs {
            if e.len() != cfg.schedule.stages.len() {
                return Err(Error::InvalidConfig(format!(
                    "--epochs lists {} stages, the schedule has {}",
                    e.len(),
                    cfg.schedule.stages.len()
                )));
            }
            for (s, &n) in cfg.schedule.stages.iter_mut().zip(e) {
                s.cycles = n;
            }
        }
        if let Some(b) = self.batch_size {
            cfg.optimizer.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn detector_config(&self) -> Result<DetectorConfig> {
        match &self.detector {
            Some(p) => read_json(p),
            None => Ok(DetectorConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Predicting {
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub conf_floor: Option<f64>,
}

impl Predicting {
    fn config(&self) -> PredictConfig {
        let d = PredictConfig::default();
        PredictConfig {
            top_k: self.top_k.unwrap_or(d.top_k),
            nms_iou: self.nms_iou.unwrap_or(d.nms_iou),
            conf_floor: self.conf_floor.unwrap_or(d.conf_floor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RasterFormat {
    Png,
    Pgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverlayFormat {
    Png,
    Ppm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Image-size and ROI-ratio statistics of an annotation file.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: Run,
    },
    /// Recommend anchor scales for one grid from annotation statistics.
    DesignAnchors {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 7)]
        grid: usize,
        /// Number of scales.
        #[arg(long, default_value_t = 6)]
        steps: usize,
        /// Ratio quantile trimmed at each end.
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: Run,
    },
    /// Generate synthetic pelvis phantoms with their annotation file.
    Synth {
        #[arg(long)]
        n: usize,
        /// Index of the first phantom in the seeded stream.
        #[arg(long, default_value_t = 0)]
        first: usize,
        /// Phantom configuration JSON; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        long_side: Option<u32>,
        #[arg(long, value_enum, default_value_t = RasterFormat::Png)]
        format: RasterFormat,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: Run,
    },
    /// Train a detector on an annotated image set.
    Train {
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        anchors: Anchors,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: Run,
    },
    /// Score a checkpoint against annotated images.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        predicting: Predicting,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: Run,
    },
    /// Predict ROIs on images.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Image files; ids are the file stems.
        #[arg(long, num_args = 1.., required_unless_present = "annotations")]
        images: Vec<PathBuf>,
        /// Predict on every image of an annotation file instead.
        #[arg(long, conflicts_with = "images")]
        annotations: Option<PathBuf>,
        #[command(flatten)]
        predicting: Predicting,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: Run,
    },
    /// Train and report one fresh model per anchor setting of a grid file.
    Grid {
        /// JSON list of {name, layers, start, stop, step}.
        #[arg(long)]
        grid: PathBuf,
        /// Training and validation images.
        #[arg(long)]
        annotations: PathBuf,
        /// Held-out test images.
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        training: Training,
        #[command(flatten)]
        predicting: Predicting,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: Run,
    },
    /// Draw ground truths (yellow) and, with a model, predictions (red).
    Render {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        predicting: Predicting,
        #[arg(long, value_enum, default_value_t = OverlayFormat::Png)]
        format: OverlayFormat,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: Run,
    },
    /// Serve images and annotations to the labeling UI on localhost.
    ServeAnnotator {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = serve::DEFAULT_PORT)]
        port: u16,
        #[command(flatten)]
        run: Run,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write(dir: &Path, name: &str, data: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, data).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Apply `f` to every item on up to `jobs` threads, keeping input order.
fn par_map<I: Sync, R: Send>(items: &[I], jobs: u16, f: impl Fn(&I) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = (jobs as usize).clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn base_dir(annotations: &Path) -> PathBuf {
    annotations.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_dataset(annotations: &Path) -> Result<(AnnotationDocument, Vec<GrayImage>)> {
    let doc = load_annotations(annotations)?;
    let images = load_images(&doc, &base_dir(annotations))?;
    Ok((doc, images))
}

#[derive(Serialize)]
struct BoxOut {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
    anchor: usize,
}

#[derive(Serialize)]
struct ImagePredictions {
    id: String,
    predictions: Vec<BoxOut>,
}

fn predictions_out(id: &str, preds: &[Prediction<f64>]) -> ImagePredictions {
    ImagePredictions {
        id: id.to_owned(),
        predictions: preds
            .iter()
            .map(|p| BoxOut {
                cx: p.bbox.cx,
                cy: p.bbox.cy,
                w: p.bbox.w,
                h: p.bbox.h,
                confidence: p.confidence,
                anchor: p.anchor,
            })
            .collect(),
    }
}

fn predict_all(
    model: &DetectorModel<f64>,
    design: &AnchorDesign,
    items: &[(String, GrayImage)],
    cfg: &PredictConfig,
    jobs: u16,
) -> Result<Vec<Vec<Prediction<f64>>>> {
    let anchors = design.build::<f64>()?;
    par_map(items, jobs, |(id, img)| predict(model, img, id, &anchors, cfg))
}

#[derive(Serialize)]
struct Split<'a> {
    train: &'a [String],
    validation: &'a [String],
}

fn execute(cmd: Command) -> Result<()> {
    use artifacts::*;
    match cmd {
        Command::Stats { annotations, out, .. } => {
            let stats = compute_stats(&load_annotations(&annotations)?)?;
            let json = to_json(&stats)?;
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write(&dir, STATS_JSON, &json)?;
                write(&dir, STATS_TXT, stats.text_table())?;
            }
            stdout(&json)
        }
        Command::DesignAnchors {
            annotations,
            grid,
            steps,
            margin,
            out,
            ..
        } => {
            let stats = compute_stats(&load_annotations(&annotations)?)?;
            let spec = recommend_scales(&stats, grid, margin, steps)?;
            let rep = design_report(&AnchorLayerSpec::new(vec![grid]), &spec, ratio_range(&stats, margin))?;
            let json = to_json(&rep)?;
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write(&dir, ANCHORS_JSON, &json)?;
            }
            stdout(&json)
        }
        Command::Synth {
            n,
            first,
            config,
            long_side,
            format,
            out,
            run,
        } => {
            let mut cfg: PhantomConfig = match &config {
                Some(p) => read_json(p)?,
                None => PhantomConfig::default(),
            };
            if let Some(s) = run.seed {
                cfg.seed = s;
            }
            if let Some(l) = long_side {
                cfg.canvas_long_side = l;
            }
            let (images, mut doc) = synth_range(&cfg, first, n)?;
            let img_dir = out.join(IMAGES_DIR);
            ensure_dir(&img_dir)?;
            let ext = match format {
                RasterFormat::Png => "png",
                RasterFormat::Pgm => "pgm",
            };
            for (img, rec) in images.iter().zip(&mut doc.images) {
                let name = format!("{}.{ext}", rec.id);
                img.save(&img_dir.join(&name))?;
                rec.file = format!("{IMAGES_DIR}/{name}");
            }
            write(&out, ANNOTATIONS_JSON, doc.to_json()?)?;
            stdout(&format!("{} phantoms written to {}\n", n, out.display()))
        }
        Command::Train {
            annotations,
            anchors,
            training,
            out,
            run,
        } => {
            let design = anchors.design()?;
            let cfg = training.train_config()?;
            let detector = DetectorConfig {
                head_grids: design.layers.grids.clone(),
                anchors_per_cell: design.anchors_per_cell()?,
                ..training.detector_config()?
            };
            if detector.canvas_side != design.layers.canvas_side {
                return Err(Error::InvalidConfig(format!(
                    "detector canvas {} differs from anchor canvas {}",
                    detector.canvas_side, design.layers.canvas_side
                )));
            }
            let (doc, images) = load_dataset(&annotations)?;
            let samples = prepare_samples::<f64>(&images, &doc.images, detector.canvas_side)?;
            let anchor_set = design.build::<f64>()?;
            let model = build_detector::<f64>(&detector, run.seed())?;
            ensure_dir(&out)?;
            let outcome = train_with_progress(model, &samples, &anchor_set, &cfg, run.seed(), &mut |r| {
                let val = match (r.val_loss, r.val_avg_iou) {
                    (Some(l), Some(i)) => format!("  val_loss {l:.4}  val_iou {i:.4}"),
                    _ => String::new(),
                };
                eprintln!("stage {} epoch {:>3}  train_loss {:.4}{val}", r.stage, r.epoch, r.train_loss);
            })?;
            save_checkpoint(&out.join(CHECKPOINT), &outcome.model, &design)?;
            write(&out, HISTORY_CSV, history_csv(&outcome.history))?;
            write(&out, TRAIN_CONFIG_JSON, to_json(&cfg)?)?;
            write(
                &out,
                SPLIT_JSON,
                to_json(&Split {
                    train: &outcome.train_ids,
                    validation: &outcome.val_ids,
                })?,
            )?;
            stdout(&format!("checkpoint written to {}\n", out.join(CHECKPOINT).display()))
        }
        Command::Eval {
            model,
            annotations,
            predicting,
            out,
            run,
        } => {
            let (net, design) = load_checkpoint::<f64>(&model)?;
            let (doc, images) = load_dataset(&annotations)?;
            let items: Vec<(String, GrayImage)> =
                doc.images.iter().map(|r| r.id.clone()).zip(images).collect();
            let preds = predict_all(&net, &design, &items, &predicting.config(), run.jobs)?;
            let gts: Vec<Vec<BBox<f64>>> = doc.images.iter().map(|r| r.boxes()).collect::<Result<_>>()?;
            let rep = report(&preds, &gts)?;
            let table = report_table(&[("eval", &rep)]);
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write(&dir, REPORT_JSON, rep.to_json()?)?;
                write(&dir, REPORT_TXT, &table)?;
                let per: Vec<ImagePredictions> =
                    items.iter().zip(&preds).map(|((id, _), p)| predictions_out(id, p)).collect();
                write(&dir, PREDICTIONS_JSON, to_json(&per)?)?;
            }
            stdout(&table)
        }
        Command::Infer {
            model,
            images,
            annotations,
            predicting,
            out,
            run,
        } => {
            let (net, design) = load_checkpoint::<f64>(&model)?;
            let items: Vec<(String, GrayImage)> = match &annotations {
                Some(a) => {
                    let (doc, imgs) = load_dataset(a)?;
                    doc.images.iter().map(|r| r.id.clone()).zip(imgs).collect()
                }
                None => images
                    .iter()
                    .map(|p| {
                        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        Ok((id, GrayImage::load(p)?))
                    })
                    .collect::<Result<_>>()?,
            };
            let preds = predict_all(&net, &design, &items, &predicting.config(), run.jobs)?;
            let per: Vec<ImagePredictions> =
                items.iter().zip(&preds).map(|((id, _), p)| predictions_out(id, p)).collect();
            let json = to_json(&per)?;
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write(&dir, PREDICTIONS_JSON, &json)?;
            }
            stdout(&json)
        }
        Command::Grid {
            grid,
            annotations,
            test,
            training,
            predicting,
            out,
            run,
        } => {
            let rows = load_grid(&grid)?;
            let budget = GridBudget {
                detector: training.detector_config()?,
                train: training.train_config()?,
                predict: predicting.config(),
                seed: run.seed(),
            };
            let side = budget.detector.canvas_side;
            let (doc, images) = load_dataset(&annotations)?;
            let samples = prepare_samples::<f64>(&images, &doc.images, side)?;
            let (tdoc, timages) = load_dataset(&test)?;
            let test_samples = prepare_samples::<f64>(&timages, &tdoc.images, side)?;
            let results = run_experiment_grid(&rows, &samples, &test_samples, &budget)?;
            let table = grid_table(&results);
            ensure_dir(&out)?;
            write(&out, GRID_JSON, to_json(&results)?)?;
            write(&out, GRID_TXT, &table)?;
            stdout(&table)
        }
        Command::Render {
            annotations,
            model,
            predicting,
            format,
            out,
            run,
        } => {
            let (doc, images) = load_dataset(&annotations)?;
            let items: Vec<(String, GrayImage)> =
                doc.images.iter().map(|r| r.id.clone()).zip(images).collect();
            let preds = match &model {
                Some(m) => {
                    let (net, design) = load_checkpoint::<f64>(m)?;
                    predict_all(&net, &design, &items, &predicting.config(), run.jobs)?
                }
                None => vec![Vec::new(); items.len()],
            };
            let dir = out.join(OVERLAYS_DIR);
            ensure_dir(&dir)?;
            let ext = match format {
                OverlayFormat::Png => "png",
                OverlayFormat::Ppm => "ppm",
            };
            let jobs: Vec<usize> = (0..items.len()).collect();
            par_map(&jobs, run.jobs, |&i| {
                let gts = doc.images[i].boxes::<f64>()?;
                let (id, img) = &items[i];
                render_overlay(img, &gts, &preds[i], &dir.join(format!("{id}.{ext}")))
            })?;
            stdout(&format!("{} overlays written to {}\n", items.len(), dir.display()))
        }
        Command::ServeAnnotator { annotations, port, .. } => {
            let server = serve::AnnotatorServer::bind(&annotations, port)?;
            stdout(&format!("serving {} on http://{}\n", annotations.display(), server.addr()))?;
            server.run();
            Ok(())
        }
    }
}

/// Parse `args` (program name first) and run the command; returns the exit
/// code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            1
        }
    }
}
