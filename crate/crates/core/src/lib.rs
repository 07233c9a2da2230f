//! Volumetric CT liver localization, segmentation and densitometry.
//!
//! The processing chain for one study is:
//!
//! 1. [`anatomy`]: correlate the craniocaudal bone-area profile against a
//!    whole-body skeleton template and gate out scans that cannot contain
//!    the liver.
//! 2. [`matcher`]: search translation, uniform scale and template over a
//!    soft-tissue feature map using normalized cross-correlation against the
//!    twelve shape templates of the [`atlas`].
//! 3. [`densitometry`]: histogram the Hounsfield values inside the placed
//!    template and split them into density modes.
//! 4. [`refine`]: adjust the boundary with mode-gated, distance-capped region
//!    growing, then re-measure.
//!
//! [`phantom`] generates synthetic studies with known ground truth and
//! [`metrics`] scores outcomes against it. [`pipeline`] ties everything
//! together for single studies and parallel batches.

pub mod anatomy;
pub mod atlas;
pub mod densitometry;
pub mod error;
pub mod geometry;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, CtVolume, FloatVolume, Region, VoxelGrid};
