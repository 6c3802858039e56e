//! Conditional feature-generating networks for zero-shot learning.
//!
//! Generators are trained on features of seen classes, conditioned on class
//! embeddings, and then used to synthesise features for unseen classes so an
//! ordinary classifier can be trained over the full label space.

pub mod autodiff;
pub mod classify;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gan_train;
pub mod gradcheck;
pub mod nets;
pub mod optim;
pub mod pipeline;

pub use autodiff::{Array, Bindings, Graph, NodeRef, Shape};
pub use classify::{CompatModel, SoftmaxModel};
pub use data::{FeatureDataset, SynthSpec};
pub use eval::GzslReport;
pub use gan_train::{SynthSet, TrainConfig, Variant};
pub use nets::{MlpParams, NetSpec};
