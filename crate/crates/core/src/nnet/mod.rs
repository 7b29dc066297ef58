//! Minimal tensor, autodiff and detector stack.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::gradient_check;
pub use graph::{sigmoid, ConvGeometry, Graph, Var};
pub use model::{build_detector, DetectorConfig, DetectorModel, ParamGroup};
pub use tensor::Tensor;
