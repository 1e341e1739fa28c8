//! DisCo: a disagreement-aware model of per-annotator and per-item label
//! distributions, with the shared-task metrics, baselines and error analysis
//! used to evaluate it.
//!
//! The pipeline is `corpus` → `features` → `trainer` (over `model` and
//! `objective`) → `predict` → `metrics` / `diagnostics`. `synthgen` builds
//! corpora with known ground truth and `cli` drives everything from files.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod predict;
pub mod synthgen;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{load_dataset, AnnotationDataset, Histogram, LabelSpace, LoadOptions, Split};
pub use error::{DiscoError, Result};
pub use features::FeatureMatrix;
pub use metrics::{evaluate, ScoreReport, TaskConfig};
pub use model::{DiscoConfig, DiscoParams};
pub use objective::{LossConfig, LossKind};
pub use predict::{predict_tasks, Aggregation, PredictionSet, Predictor};
pub use synthgen::{generate, GeneratorSpec, SyntheticCorpus};
pub use trainer::{train, FeaturePair, TrainConfig, TrainReport, Trainer};
