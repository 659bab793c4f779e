//! Dataset synthesis, persistence, metrics, configuration and the end-to-end
//! pipeline.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use data::{gen_dataset, gen_texture, load_dataset, save_dataset, LabeledSet, TextureDatasetSpec};
pub use metrics::{evaluate, MetricsReport};
pub use pipeline::{run_pipeline, RunPaths, RunReport};
