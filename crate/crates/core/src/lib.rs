//! Core data model and the pseudo-label machinery for training 3D segmentation
//! networks from cross annotation: a handful of labeled slices on two
//! orthogonal planes of each volume.
//!
//! The crate is split along the pipeline:
//!
//! - [`volume`], [`nifti`], [`preprocess`], [`manifest`]: grids, file I/O and
//!   the geometry shared by every other stage.
//! - [`annotation`]: building cross annotations and searching the slice budget.
//! - [`prob`]: probability fields produced by the networks.
//! - [`teaching`]: pseudo-label selection, label mixing, weight masks, losses.
//! - [`metrics`]: Dice, Jaccard, HD95 and ASD.
//! - [`phantom`]: deterministic synthetic volumes with dense ground truth.
//!
//! Data-parallel loops go through [`exec::Execution`], which runs on rayon when
//! the `parallel` feature is enabled and sequentially otherwise.

pub mod annotation;
pub mod error;
pub mod exec;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod prob;
pub mod real;
pub mod teaching;
pub mod volume;

pub use annotation::CrossAnnotation;
pub use error::{Error, Result};
pub use exec::Execution;
pub use prob::{NetSource, ProbabilityField};
pub use real::Real;
pub use volume::{Dims, IntensityVolume, LabelVolume, Plane, UNLABELED};
