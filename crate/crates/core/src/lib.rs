//! Perceptual replication audits of generated images against a training corpus.
//!
//! A sample is compared with its nearest corpus image under a layered
//! perceptual distance. If that distance is at or below a threshold
//! calibrated from labeled similar/dissimilar pairs, the sample is reported
//! as a replication, otherwise as novel.
//!
//! The pipeline, bottom to top:
//!
//! - [`image`]: decoding, canonical resizing, shift and blur perturbations
//! - [`metric`]: the seeded filter bank, feature stacks and distances
//! - [`embed`]: pooled embeddings, exact and graph-based search, re-ranking,
//!   and the feature, index and manifest files
//! - [`calibration`]: ROC/PR curves and threshold policies
//! - [`audit`]: verdicts, attribution and batch reports
//! - [`workspace`]: the on-disk stages driven by the command-line tool

pub mod audit;
pub mod calibration;
pub mod config;
pub mod embed;
pub mod error;
pub mod image;
pub mod metric;
pub mod synth;
pub mod workspace;

mod binio;

pub use error::{Error, Result};
