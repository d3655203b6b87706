//! Cross-machine anomaly detection toolkit.
//!
//! Embeddings of multichannel sensor cycles are split into condition-related
//! and machine-identity-related dimensions by ranking the Gini importances of
//! two random forests (one predicting normal/abnormal, one predicting the
//! source machine). The condition dimensions that are not also machine
//! dimensions form a domain-invariant mask; unsupervised detectors trained on
//! source-machine normals in that subspace are then applied to an unseen
//! target machine.
//!
//! Module map:
//!
//! - [`data`]: records, datasets, splits, masks and their on-disk formats.
//! - [`augment`]: time-shift and mix-up augmentation of normal cycles.
//! - [`embed`]: spectral stand-in featurizer and feature normalization.
//! - [`forest`]: random-forest classifier with impurity importances.
//! - [`disentangle`]: dual-forest feature ranking and the overlap gate.
//! - [`nnkit`]: small dense-network kit used by the neural detectors.
//! - [`detectors`]: isolation forest, deep SVDD, autoencoder, GANomaly.
//! - [`tune`]: label-free model selection (expected anomaly gap).
//! - [`evalkit`]: threshold metrics, ROC/PR areas, percentile sweeps.
//! - [`synthgen`]: deterministic multi-machine benchmark generator.

pub mod augment;
pub mod data;
pub mod detectors;
pub mod disentangle;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod forest;
pub mod nnkit;
pub mod rng;
pub mod synthgen;
pub mod tune;

pub use error::{Error, Result};
