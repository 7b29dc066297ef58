//! Annotation ingestion, dataset statistics, preprocessing, augmentation and
//! the synthetic phantom generator.

pub mod annotation;
pub mod augment;
pub mod raster;
pub mod stats;
pub mod synth;

pub use annotation::{load_annotations, load_images, AnnotationDocument, ImageRecord, Roi};
pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use raster::{preprocess, GrayImage, CANVAS_SIDE};
pub use stats::{compute_stats, DatasetStats, Histogram, Summary};
pub use synth::{synth_generate, synth_one, synth_range, PhantomConfig};
