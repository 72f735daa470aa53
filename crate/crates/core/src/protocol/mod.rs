//! Datasets, folds, episode sampling, metrics, and the train/evaluate loops.

pub mod dataset;
pub mod folds;
pub mod metrics;
pub mod runner;
pub mod sampling;
pub mod synth;

pub use dataset::{DatasetIndex, ImageEntry, ImageSource, ImageStore, LabeledImage};
pub use folds::{build_folds, FoldScheme, FoldSpec, FOLDS, PASCAL_CLASSES};
pub use metrics::{fb_iou, miou, Counts, EvalResult};
pub use runner::{run_evaluation, run_training, EvalConfig, StepLog, TrainConfig, TrainOutcome};
pub use sampling::{episode_input, filter_train_images, sample_episode, Episode, Sampling, Split, TRAIN_IMAGE_CAP};
pub use synth::{materialize, synth_index, SynthConfig, SynthSpec};
