//! Multi-similarity hyperrelation network for few-shot semantic segmentation.
//!
//! The crate is framework-free: a small dense [`Tensor`] type, a reverse-mode
//! tape over a fixed operation set, a frozen feature extractor, the prototype
//! and cosine similarity core, the symmetric merging network, and the episodic
//! train/evaluate protocol.

pub mod backbone;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod network;
pub mod ops;
pub mod par;
pub mod params;
pub mod protocol;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use network::{Branch, EpisodeInput, HyperFeature, LossReport, MshNet, NetConfig, SegLogits, ShotInput, SimMode};
pub use par::Exec;
pub use params::{exp_lr_decay, sgd_step, ParamSet};
pub use tensor::{Scalar, Tensor};
