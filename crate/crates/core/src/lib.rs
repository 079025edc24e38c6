//! Offboard auto-labeling: multi-view mask tracks plus LiDAR in, 3D point
//! labels, box tracks and occupancy grids out.

// validation uses `!(x > 0.0)` so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod association;
pub mod boxes;
pub mod bundle_io;
pub mod completion;
pub mod dbscan;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod hull;
pub mod kalman;
pub mod occupancy;
pub mod pipeline;
pub mod projection;
pub mod scene;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
