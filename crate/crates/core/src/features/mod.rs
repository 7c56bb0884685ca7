//! Feature detection, description, matching and geometric verification.
//!
//! The detector is a difference-of-Gaussians scale-space detector with a
//! 4×4×8 gradient-histogram descriptor. It is configured by octave count,
//! layers per octave and descriptor size; the `sift_like` and `surf_like`
//! presets differ only in layers per octave.

mod detector;
mod matching;
mod ransac;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detector::detect_and_describe;
pub use matching::match_descriptors;
pub use ransac::{
    eight_point, ransac_fundamental, ransac_fundamental_points, sampson_distance,
    FundamentalMatrix, RansacParams, RansacResult,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image is {width}x{height}, detection needs at least 32x32")]
    ImageTooSmall { width: usize, height: usize },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("descriptor list is empty")]
    EmptyInput,
    #[error("need at least 8 matches for the eight-point algorithm, got {0}")]
    InsufficientMatches(usize),
    #[error("no consensus: best model has {0} inliers (< 8)")]
    NoConsensus(usize),
}

impl FeatureError {
    pub fn code(&self) -> &'static str {
        match self {
            FeatureError::ImageTooSmall { .. } => "image_too_small",
            FeatureError::InvalidConfig(_) => "invalid_config",
            FeatureError::EmptyInput => "empty_input",
            FeatureError::InsufficientMatches(_) => "insufficient_matches",
            FeatureError::NoConsensus(_) => "no_consensus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorPreset {
    SiftLike,
    SurfLike,
}

impl DetectorPreset {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorPreset::SiftLike => "sift-like",
            DetectorPreset::SurfLike => "surf-like",
        }
    }
}

impl std::str::FromStr for DetectorPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sift-like" | "sift" => Ok(DetectorPreset::SiftLike),
            "surf-like" | "surf" => Ok(DetectorPreset::SurfLike),
            other => Err(format!("unknown detector preset '{other}' (expected sift-like or surf-like)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub octaves: usize,
    pub layers_per_octave: usize,
    pub descriptor_bins: usize,
    /// DoG contrast threshold on [0, 1] intensities, divided by the layer
    /// count before use.
    pub contrast_threshold: f32,
    /// Principal-curvature ratio above which edge-like extrema are rejected.
    pub edge_threshold: f32,
    pub ratio_test: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::preset(DetectorPreset::SiftLike)
    }
}

impl DetectorConfig {
    pub fn preset(preset: DetectorPreset) -> Self {
        let layers_per_octave = match preset {
            DetectorPreset::SiftLike => 5,
            DetectorPreset::SurfLike => 2,
        };
        Self {
            octaves: 4,
            layers_per_octave,
            descriptor_bins: 128,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            ratio_test: 0.8,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.octaves < 1 {
            return Err(FeatureError::InvalidConfig("octaves must be >= 1".into()));
        }
        if self.layers_per_octave < 1 {
            return Err(FeatureError::InvalidConfig("layers_per_octave must be >= 1".into()));
        }
        if self.descriptor_bins == 0 || self.descriptor_bins % 8 != 0 {
            return Err(FeatureError::InvalidConfig(
                "descriptor_bins must be a positive multiple of 8".into(),
            ));
        }
        if self.grid_size().is_none() {
            return Err(FeatureError::InvalidConfig(format!(
                "descriptor_bins = {} is not 8 x (grid side)^2",
                self.descriptor_bins
            )));
        }
        if !(self.ratio_test > 0.0 && self.ratio_test < 1.0) {
            return Err(FeatureError::InvalidConfig("ratio_test must lie in (0, 1)".into()));
        }
        if !(self.contrast_threshold >= 0.0) || !(self.edge_threshold > 1.0) {
            return Err(FeatureError::InvalidConfig(
                "contrast_threshold must be >= 0 and edge_threshold > 1".into(),
            ));
        }
        Ok(())
    }

    /// Side of the spatial histogram grid (4 for 128 bins).
    pub(crate) fn grid_size(&self) -> Option<usize> {
        let cells = self.descriptor_bins / 8;
        let side = (cells as f64).sqrt().round() as usize;
        (side >= 1 && side * side == cells).then_some(side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub octave: usize,
    /// Blur scale in input-image pixels.
    pub scale: f64,
    /// Dominant gradient orientation, radians in [0, 2π).
    pub orientation: f64,
    /// Absolute interpolated DoG value.
    pub response: f64,
}

impl Keypoint {
    pub fn position(&self) -> crate::geometry::PixelPoint {
        crate::geometry::PixelPoint::new(self.u, self.v)
    }
}

/// L2-normalized gradient histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f32>);

impl Descriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Summed in eight independent lanes so the loop vectorizes; the result
    /// is still exactly symmetric in the two arguments.
    pub fn distance_squared(&self, other: &Descriptor) -> f32 {
        let mut lanes = [0f32; 8];
        let (a, b) = (self.0.chunks_exact(8), other.0.chunks_exact(8));
        let tail: f32 = a.remainder().iter().zip(b.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
        for (ca, cb) in a.zip(b) {
            for k in 0..8 {
                let d = ca[k] - cb[k];
                lanes[k] += d * d;
            }
        }
        lanes.iter().sum::<f32>() + tail
    }
}

/// Detected features of one image as parallel keypoint/descriptor lists,
/// sorted by decreasing response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f32,
}
