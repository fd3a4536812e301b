//! Hierarchical zoom-graph image classification.
//!
//! An image becomes a graph: a root node covering the whole frame, child
//! nodes covering subregions chosen by a learned zoom policy. Convolutional
//! embeddings feed graph attention layers; one head decides where to zoom,
//! another classifies the finished graph.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod models;
pub mod pgm;
pub mod seeding;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, TrainMeta};
pub use config::{Config, DataConfig, OptimizerKind, RunConfig};
pub use dataset::{LoadedSample, Manifest, ManifestEntry, Split};
pub use error::{Error, Result};
pub use graph::{ZoomDecision, ZoomGraph, ZoomNode};
pub use image::{grid_split, Image, Region};
pub use labels::Mask;
pub use models::{CnnConfig, CnnParams, GatLayerParams, ModelBundle};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
pub use train::{evaluate, train_epoch, EpochStats, EvalReport, Optimizer, SampleRun, ZoomPolicy};
