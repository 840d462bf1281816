//! LiDAR loop closure for graph-based SLAM.
//!
//! Every scan is summarized by a compact global [`descriptor`]; a boosted
//! [`detector`] decides whether two descriptors come from the same place.
//! [`loopsearch`] restricts the search to a radius that grows with the
//! odometry uncertainty (or searches the whole map at the start of a new
//! session), and candidate loops are verified by coarse-to-fine
//! [`registration`] before they enter the [`posegraph`]. The [`harness`]
//! module holds datasets, metrics, a synthetic world and the replay driver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod descriptor;
pub mod detector;
pub mod harness;
pub mod loopsearch;
pub mod pointcloud;
pub mod posegraph;
pub mod registration;
