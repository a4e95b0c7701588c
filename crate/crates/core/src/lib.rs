//! Object-level semantic SLAM back-end.
//!
//! The pipeline turns 2D detections into grounded 3D object proposals,
//! selects a consistent subset with a conditional random field over a short
//! window of frames, associates the selections with persistent landmarks, and
//! refines poses, feature points and landmarks with Levenberg-Marquardt.
//! A deterministic simulator stands in for the camera front-end.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod association;
pub mod classes;
pub mod crf;
pub mod eval;
pub mod geometry;
pub mod graph_opt;
pub mod par;
pub mod proposals;
pub mod world_sim;
