//! Experiment driver: synthetic data, feature files, configuration, the
//! staged training curriculum, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;
pub use data::{frame_stack, generate_synthetic, Dataset, FrameStacking, SyntheticTask, Utterance};
pub use eval::{entropy_pretrain_targets, evaluate, Baseline, MetricsReport, UtteranceTrace};
pub use train::{load_datasets, train, train_on, Datasets, TrainOutcome};
