//! Synthetic optical-flow task, models and trainer.

pub mod color;
pub mod dataset;
pub mod metric;
pub mod models;
pub mod train;

pub use color::{flow_to_ppm, flow_to_rgb};
pub use dataset::{gen_flow_dataset, render_scene, DatasetConfig, FlowSample, Motion, ObjectShape, ObjectSpec};
pub use metric::{aepe, aepe_batch, epe_loss};
pub use models::{build_model, ModelKind, ModelSpec};
pub use train::{load_trained, save_trained, train, MetricsRow, TrainConfig, TrainResult};
