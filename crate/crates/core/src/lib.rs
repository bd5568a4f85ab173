//! Incremental few-shot learning with attention attractor networks.
//!
//! A frozen base classifier `W_a` is extended per episode with fast weights
//! `W_b` trained on a handful of novel-class examples. The fast weights are
//! regularized towards attractors predicted from the base weights; the
//! attractor meta-parameters are trained through the inner optimization with
//! recurrent back-propagation.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attractor;
pub mod classifier;
mod container;
pub mod desk;
pub mod embeddings;
pub mod error;
pub mod exec;
pub mod implicit_grad;
pub mod inner_solver;
pub mod meta;
pub mod model;

pub use attractor::{AttractorMode, MetaParams};
pub use classifier::{BaseClassifier, ClassifierKind, FastShape, FastWeights};
pub use embeddings::{Episode, EpisodeConfig, EpisodeSource, SyntheticWorld};
pub use error::{Error, Result};
pub use exec::Execution;
pub use implicit_grad::{HyperGradient, RbpConfig};
pub use inner_solver::SolverConfig;
pub use model::ModelConfig;
