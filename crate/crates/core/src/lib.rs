//! Micro-expression recognition from paired 2D video and 3D point-cloud
//! sequences.
//!
//! The pipeline runs in four stages:
//!
//! * [`preprocess2d`] / [`preprocess3d`]: face alignment and cropping of the
//!   video volume; point-cloud denoising, nose-tip localisation, spherical
//!   cropping and ICP registration of the cloud sequence.
//! * [`lbptop`]: block-partitioned LBP-TOP texture histograms and the
//!   mean-difference landmark weights.
//! * [`curvature`]: principal curvature estimation by local cubic fitting,
//!   HK surface typing, shape index, and landmark-local 3D features.
//! * [`learn`]: a probabilistic classifier, probability-level fusion of the
//!   2D and 3D predictions, metrics, and LOSO / k-fold harnesses.
//!
//! [`synth`] produces synthetic datasets with analytic curvature oracles, and
//! [`pipeline`] ties everything to the on-disk dataset layout used by the
//! `mex3d` command-line tool.

pub mod cloud;
pub mod config;
pub mod curvature;
pub mod dataset;
pub mod error;
pub mod feature;
pub mod io;
pub mod lbptop;
pub mod learn;
pub mod pipeline;
pub mod preprocess2d;
pub mod preprocess3d;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
