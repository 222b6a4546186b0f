//! Image-guided training of per-point LiDAR segmenters under weak and
//! semi-supervision, at toy scale.
//!
//! The crate covers the full path from synthetic data to evaluation:
//! scene generation, camera projection, a 2D guide network trained with
//! weakly supervised domain adaptation, the 3D loss terms, mean-teacher
//! tracking, field-of-view mixing and the metrics suite.

// Checks such as `!(x > 0.0)` are written that way to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod fovmix;
pub mod geometry;
pub mod ig2d;
pub mod losses3d;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod teacher;

pub use error::{Error, Result};
