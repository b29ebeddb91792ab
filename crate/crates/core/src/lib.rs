//! Contrastive self-supervised learning on sparse 3D cortical-fold skeleton
//! crops.
//!
//! The pipeline: [`synth`] builds labeled skeleton corpora, [`augment`] turns
//! each crop into two topology-aware views, [`contrastive`] trains the
//! [`nn`] backbone with the NT-Xent objective, and [`probe`] scores the frozen
//! embeddings with a linear classifier and ROC-AUC.

pub mod augment;
pub mod contrastive;
pub mod error;
pub mod nn;
pub mod parallel;
pub mod probe;
pub mod seed;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
