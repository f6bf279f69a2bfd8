//! Membership inference auditing for semi-supervised image classifiers.
//!
//! The pipeline trains a target model and a disjoint shadow model with the
//! same recipe, fits attacks on the shadow model's member/nonmember
//! posteriors, scores the target model's samples, and evaluates defenses.
//! Every stage is deterministic for a given seed: data synthesis, splits,
//! augmentation draws, initialization, batch order, and attack fitting all
//! derive from named counter-based random streams.
//!
//! Module map:
//! - [`data`]: image samples, dataset splits, loaders, synthetic data
//! - [`augment`]: weak and strong (randaugment-style) view sampling
//! - [`models`]: network graph, classifiers, losses, optimizers, checkpoints
//! - [`ssl`]: semi-supervised training loops
//! - [`attacks`]: membership attacks and their features
//! - [`eval`]: accuracy, AUC, and leakage indicators
//! - [`defenses`]: posterior truncation, stacking, clipped noisy updates,
//!   early stopping
//! - [`report`], [`runner`]: artifacts and stage orchestration

pub mod attacks;
pub mod augment;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod models;
pub mod report;
pub mod rng;
pub mod runner;
pub mod ssl;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
