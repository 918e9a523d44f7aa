//! KAN and MLP autoencoders for implicit-feedback collaborative filtering,
//! with continual-learning evaluation and pruning-based explanations.

pub mod activation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interpret;
pub mod kan_layer;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod spline;
pub mod train;

pub use activation::BaseActivation;
pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
pub use data::{split_continual, split_static, ContinualBlocks, InteractionDataset, LoadOptions, SplitView};
pub use error::{KanError, Result};
pub use interpret::{compute_importance, Explanation, GraphFormat, ImportanceGraph};
pub use kan_layer::KanLayer;
pub use metrics::{continual_metrics, evaluate, ContinualReport, EvalReport, EvalSet};
pub use mlp::DenseLayer;
pub use model::{CfModel, LossKind, ModelConfig, ModelKind};
pub use optim::{Adam, AdamConfig};
pub use spline::SplineGrid;
pub use train::{continual_train, train, ContinualOutcome, DeltaTrace, History, TrackSpec, TrainConfig};
