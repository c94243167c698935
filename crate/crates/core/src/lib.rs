//! Interactive fusion of multiple feature representations of one dataset.
//!
//! The pipeline has two phases. A small unified sample is drawn from every
//! feature set, each per-feature sample is embedded into a shared
//! `m`-dimensional space aligned against a reference layout, and weights are
//! tuned on the cheap sample fusion. The chosen weights are then applied to
//! every item after an orthogonal local affine projection of the full
//! feature sets into the same space.
//!
//! Modules follow that flow: [`ingest`] → [`sampling`] → [`mapping`] →
//! [`projection`] → [`fusion`], with [`metrics`] for evaluation and
//! [`analysis`] for the clustering layer built on fused results.

pub mod analysis;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod mapping;
pub mod matrix;
pub mod metrics;
pub mod projection;
pub mod rng;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
pub use fusion::{DialState, WeightVector};
pub use ingest::Dataset;
pub use mapping::{DistanceMatrix, Embedding, MappingOptions};
pub use matrix::{FeatureMatrix, Rows};
pub use sampling::SampleSet;
