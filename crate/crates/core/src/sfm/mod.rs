//! Incremental structure from motion over keyframe clusters.
//!
//! Each cluster is reconstructed independently in its own gauge: the first
//! camera at the identity and the initial pair's baseline of unit length.
//! Overlapping clusters therefore disagree by a similarity transform, which
//! the `cloud` alignment stage removes.

mod cluster;
mod path;
mod resection;
mod tracks;
mod twoview;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BAParams, BAReport, BundleError};
use crate::cloud::PointCloud;
use crate::geometry::{CameraIntrinsics, CameraPose, Point3};

pub use cluster::{reconstruct_all, reconstruct_cluster};
pub use path::{format_camera_path, parse_camera_path};
pub use resection::{dlt_resection, register_pose, Resection};
pub use tracks::{build_tracks, chain_matches, PairMatches, TrackSet};
pub use twoview::{decompose_essential, init_two_view, parallax_deg, TwoView};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("insufficient tracks: {0}")]
    InsufficientTracks(String),
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("initialization failed: {0}")]
    InitializationFailed(String),
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl SfmError {
    pub fn code(&self) -> &'static str {
        match self {
            SfmError::InsufficientTracks(_) => "insufficient_tracks",
            SfmError::DegeneratePair(_) => "degenerate_pair",
            SfmError::RegistrationFailed(_) => "registration_failed",
            SfmError::InitializationFailed(_) => "initialization_failed",
            SfmError::BadParameters(_) => "bad_parameters",
            SfmError::Bundle(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmParams {
    /// Each keyframe is matched against this many successors.
    pub window: usize,
    pub cluster_size: usize,
    pub cluster_overlap: usize,
    pub ratio_test: f32,
    pub ransac_epsilon_px: f64,
    pub min_pair_inliers: usize,
    /// Median triangulation angle required of the seed pair.
    pub min_seed_parallax_deg: f64,
    /// Smallest triangulation angle for a new point.
    pub min_triangulation_deg: f64,
    pub resection_epsilon_px: f64,
    /// Tracks reprojecting worse than this after the final adjustment are
    /// removed.
    pub max_reprojection_px: f64,
    /// Final points need this many registered views (capped by the number
    /// of registered keyframes); short tracks triangulate poorly.
    pub min_track_length: usize,
    /// Bundle adjustment after every this many registrations.
    pub ba_every: usize,
    pub ba: BAParams,
    pub seed: u64,
}

impl Default for SfmParams {
    fn default() -> Self {
        Self {
            window: 5,
            cluster_size: 30,
            cluster_overlap: 10,
            ratio_test: 0.8,
            ransac_epsilon_px: 1.0,
            min_pair_inliers: 20,
            min_seed_parallax_deg: 1.0,
            min_triangulation_deg: 1.0,
            resection_epsilon_px: 2.0,
            max_reprojection_px: 2.0,
            min_track_length: 3,
            ba_every: 5,
            ba: BAParams::default(),
            seed: 0,
        }
    }
}

impl SfmParams {
    pub fn validate(&self) -> Result<(), SfmError> {
        let bad = |m: &str| Err(SfmError::BadParameters(m.into()));
        if self.window == 0 {
            return bad("window must be positive");
        }
        if !(self.cluster_size > self.cluster_overlap && self.cluster_overlap >= 2) {
            return bad("cluster size C and overlap O must satisfy C > O >= 2");
        }
        if self.min_pair_inliers < 8 {
            return bad("min_pair_inliers must be at least 8");
        }
        if self.ba_every == 0 {
            return bad("ba_every must be positive");
        }
        if !(self.ransac_epsilon_px > 0.0 && self.resection_epsilon_px > 0.0 && self.max_reprojection_px > 0.0) {
            return bad("pixel thresholds must be positive");
        }
        self.ba.validate()?;
        Ok(())
    }
}

/// A chain of matched keypoints presumed to image one 3D point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    /// `(keyframe, keypoint)` pairs sorted by keyframe, at most one per
    /// keyframe.
    pub observations: Vec<(usize, usize)>,
    pub point: Option<Point3>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub cluster_id: usize,
    /// Registered poses keyed by frame index.
    pub poses: BTreeMap<usize, CameraPose>,
    pub intrinsics: CameraIntrinsics,
    /// Triangulated tracks; observations are keyed by frame index.
    pub tracks: Vec<Track>,
    pub mean_reproj_error_px: f64,
    /// Frame indices of the seed pair.
    pub seed_pair: (usize, usize),
    pub ba_reports: Vec<BAReport>,
}

impl Reconstruction {
    pub fn points(&self) -> Vec<Point3> {
        self.tracks.iter().filter_map(|t| t.point).collect()
    }

    pub fn camera_path(&self) -> String {
        let entries: Vec<(usize, CameraPose)> = self.poses.iter().map(|(&i, p)| (i, *p)).collect();
        format_camera_path(&entries)
    }

    pub fn point_cloud(&self) -> PointCloud {
        let tracks = self.tracks.iter().filter(|t| t.point.is_some());
        PointCloud {
            points: tracks.clone().map(|t| t.point.unwrap()).collect(),
            colors: Some(tracks.map(|t| t.color).collect()),
            source_id: format!("cluster{}", self.cluster_id),
            sources: None,
        }
    }

    /// Concatenated bundle adjustment traces, each preceded by a comment
    /// line naming the run.
    pub fn ba_trace_text(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.ba_reports.iter().enumerate() {
            out.push_str(&format!("# run {i} {:?}\n", r.termination));
            out.push_str(&r.trace_text());
        }
        out
    }
}

/// Overlapping keyframe ranges, each reconstructed separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub clusters: Vec<std::ops::Range<usize>>,
    pub cluster_size: usize,
    pub overlap: usize,
}

/// Sliding ranges `[0, C)`, `[C-O, 2C-O)`, ... over `n` keyframes; the last
/// range is clipped at `n`.
pub fn partition_clusters(n: usize, cluster_size: usize, overlap: usize) -> Result<ClusterPlan, SfmError> {
    if !(cluster_size > overlap && overlap >= 2) {
        return Err(SfmError::BadParameters(format!(
            "need C > O >= 2, got C={cluster_size} O={overlap}"
        )));
    }
    if n < 2 {
        return Err(SfmError::BadParameters(format!("need at least 2 keyframes, got {n}")));
    }
    let mut clusters = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cluster_size).min(n);
        clusters.push(start..end);
        if end == n {
            break;
        }
        start = end - overlap;
    }
    Ok(ClusterPlan {
        clusters,
        cluster_size,
        overlap,
    })
}
