//! Local susceptibilities for small attention-only transformers.
//!
//! The pipeline: localized SGLD around a checkpoint ([`sampler`]) records
//! loss traces, [`estimators`] turn traces into susceptibilities, per-token
//! susceptibilities and LLCs, and [`analysis`] runs PCA over the resulting
//! response matrices. [`oracle`] supplies a Gaussian ground truth for every
//! estimator.

pub mod analysis;
pub mod corpus;
pub mod estimators;
pub mod model;
pub mod oracle;
pub mod patterns;
pub mod report;
pub mod sampler;
