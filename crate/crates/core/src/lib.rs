//! Reconstruction of a scene as a 3D point cloud from an ordered sequence of
//! video frames, plus the alignment, measurement, annotation and reporting
//! layer used to investigate the result.
//!
//! Pipeline: [`keyframing`] selects keyframes by RANSAC inlier counts,
//! [`sfm`] reconstructs overlapping keyframe clusters (refined by
//! [`bundle`]), [`cloud`] cleans and aligns the per-cluster clouds, and
//! [`scene`] records measurements and annotations and renders reports.
//! [`synth`] generates ground-truth scenes and frames for testing.

pub mod bundle;
pub mod cloud;
pub mod features;
pub mod geometry;
pub mod image;
pub mod keyframing;
pub mod rng;
pub mod scene;
pub mod sfm;
pub mod synth;
