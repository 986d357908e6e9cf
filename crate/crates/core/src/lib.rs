//! Open-vocabulary feature radiance fields.
//!
//! A voxel-grid radiance field carrying a per-point open-set feature next to
//! density and color, trained from posed RGB-D frames and per-pixel feature
//! maps. On top of the field sit multi-view feature fusion with per-point
//! uncertainty, uncertainty-driven novel view proposals, and open-vocabulary
//! segmentation of point clouds.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the `openfield` crate.
#![no_std]

extern crate alloc;

pub mod ablation;
pub mod benchmark;
pub mod error;
pub mod eval;
pub mod field;
pub mod fusion;
mod linalg;
pub mod math;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod train;
pub mod viewsel;

pub use error::{Error, Result};
pub use math::{Aabb, Pose, Vec3};
