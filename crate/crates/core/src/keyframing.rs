//! Keyframe selection by RANSAC inlier count.
//!
//! Frame 0 is always a keyframe. Every later frame is matched against the
//! most recent keyframe only; when the number of epipolar inliers falls below
//! the threshold `t`, that frame becomes the next keyframe.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    detect_and_describe, match_descriptors, ransac_fundamental, DetectorConfig, FeatureError, Features,
    RansacParams,
};
use crate::image::{list_frames, Frame, ImageError};

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid keyframe policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

impl KeyframeError {
    pub fn code(&self) -> &'static str {
        match self {
            KeyframeError::EmptySequence => "empty_sequence",
            KeyframeError::DimensionMismatch { .. } => "dimension_mismatch",
            KeyframeError::InvalidPolicy(_) => "invalid_policy",
            KeyframeError::Image(ImageError::NoFrames(_)) => "empty_sequence",
            KeyframeError::Image(_) => "image_io",
            KeyframeError::Feature(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    /// A frame becomes a keyframe when its inliers against the current
    /// keyframe drop below this count.
    pub inlier_threshold: usize,
    pub ransac_epsilon_px: f64,
    pub seed: u64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            inlier_threshold: 200,
            ransac_epsilon_px: 1.0,
            seed: 0,
        }
    }
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        if self.inlier_threshold < 8 {
            return Err(KeyframeError::InvalidPolicy(format!(
                "inlier threshold {} < 8",
                self.inlier_threshold
            )));
        }
        if !(self.ransac_epsilon_px > 0.0) {
            return Err(KeyframeError::InvalidPolicy("ransac epsilon must be > 0".into()));
        }
        Ok(())
    }

    fn ransac(&self) -> RansacParams {
        RansacParams {
            epsilon_px: self.ransac_epsilon_px,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Ordered, random-access frames.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Frame, ImageError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [Frame] {
    fn len(&self) -> usize {
        <[Frame]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<Frame, ImageError> {
        Ok(self[index].clone())
    }
}

impl FrameSource for Vec<Frame> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn frame(&self, index: usize) -> Result<Frame, ImageError> {
        Ok(self[index].clone())
    }
}

/// Image files of a directory in lexicographic order, decoded on demand.
#[derive(Debug, Clone)]
pub struct FrameDir {
    pub paths: Vec<PathBuf>,
}

impl FrameDir {
    pub fn open(dir: &std::path::Path) -> Result<FrameDir, ImageError> {
        Ok(FrameDir {
            paths: list_frames(dir)?,
        })
    }
}

impl FrameSource for FrameDir {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn frame(&self, index: usize) -> Result<Frame, ImageError> {
        Frame::load(&self.paths[index])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_index: usize,
    pub features: Features,
    /// Frame color under each keypoint.
    pub colors: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub frame_indices: Vec<usize>,
    /// Inliers against the previous keyframe that triggered each selection;
    /// 0 for frame 0, which needs no trigger.
    pub trigger_inlier_counts: Vec<usize>,
    pub keyframes: Vec<Keyframe>,
    pub total_frames: usize,
    pub width: usize,
    pub height: usize,
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn stats(&self) -> KeyframeStats {
        keyframe_stats(self.len(), self.total_frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeStats {
    pub total_frames: usize,
    pub keyframe_count: usize,
    pub retention_percent: f64,
}

impl std::fmt::Display for KeyframeStats {
    /// `count (percent%)` with two decimals.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({:.2}%)", self.keyframe_count, self.retention_percent)
    }
}

pub fn keyframe_stats(keyframe_count: usize, total_frames: usize) -> KeyframeStats {
    assert!(keyframe_count <= total_frames, "more keyframes than frames");
    let retention_percent = if total_frames == 0 {
        0.0
    } else {
        100.0 * keyframe_count as f64 / total_frames as f64
    };
    KeyframeStats {
        total_frames,
        keyframe_count,
        retention_percent,
    }
}

/// Epipolar inliers between two feature sets: ratio-test matches filtered by
/// RANSAC. Too few matches or no consensus count as zero inliers.
pub fn count_inliers(a: &Features, b: &Features, ratio: f32, policy: &KeyframePolicy) -> usize {
    let Ok(matches) = match_descriptors(&a.descriptors, &b.descriptors, ratio) else {
        return 0;
    };
    match ransac_fundamental(&matches, &a.keypoints, &b.keypoints, &policy.ransac()) {
        Ok(r) => r.inlier_count(),
        Err(_) => 0,
    }
}

fn detect_frame(frame: &Frame, cfg: &DetectorConfig) -> Result<(Features, Vec<[u8; 3]>), FeatureError> {
    let features = detect_and_describe(&frame.gray, cfg)?;
    let colors = features
        .keypoints
        .iter()
        .map(|k| frame.color.sample(k.u, k.v))
        .collect();
    Ok((features, colors))
}

/// The sequential keyframe decision, fed one detected frame at a time.
#[derive(Debug, Clone)]
pub struct KeyframeSelector {
    policy: KeyframePolicy,
    ratio: f32,
    set: KeyframeSet,
}

impl KeyframeSelector {
    pub fn new(policy: KeyframePolicy, ratio: f32) -> Self {
        Self {
            policy,
            ratio,
            set: KeyframeSet {
                frame_indices: Vec::new(),
                trigger_inlier_counts: Vec::new(),
                keyframes: Vec::new(),
                total_frames: 0,
                width: 0,
                height: 0,
            },
        }
    }

    /// Offer the next frame; returns the trigger inlier count if it became a
    /// keyframe.
    pub fn push(&mut self, frame_index: usize, features: Features, colors: Vec<[u8; 3]>) -> Option<usize> {
        self.set.total_frames += 1;
        let trigger = match self.set.keyframes.last() {
            None => Some(0),
            Some(last) => {
                let inliers = count_inliers(&last.features, &features, self.ratio, &self.policy);
                log::debug!("frame {frame_index}: {inliers} inliers against keyframe {}", last.frame_index);
                (inliers < self.policy.inlier_threshold).then_some(inliers)
            }
        };
        if let Some(count) = trigger {
            self.set.frame_indices.push(frame_index);
            self.set.trigger_inlier_counts.push(count);
            self.set.keyframes.push(Keyframe {
                frame_index,
                features,
                colors,
            });
        }
        trigger
    }

    pub fn finish(mut self, width: usize, height: usize) -> KeyframeSet {
        self.set.width = width;
        self.set.height = height;
        self.set
    }
}

/// Select keyframes from an ordered frame source.
///
/// Detection runs ahead in parallel batches; the selection itself is the
/// sequential loop, so the result equals a purely sequential run.
pub fn select_keyframes<S: FrameSource + ?Sized>(
    frames: &S,
    cfg: &DetectorConfig,
    policy: &KeyframePolicy,
) -> Result<KeyframeSet, KeyframeError> {
    cfg.validate()?;
    policy.validate()?;
    let n = frames.len();
    if n == 0 {
        return Err(KeyframeError::EmptySequence);
    }
    let batch = (2 * rayon::current_num_threads()).max(2);
    let mut selector = KeyframeSelector::new(*policy, cfg.ratio_test);
    let mut dims = (0, 0);
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let detected: Vec<Result<(usize, usize, Features, Vec<[u8; 3]>), KeyframeError>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let frame = frames.frame(i)?;
                let (f, c) = detect_frame(&frame, cfg)?;
                Ok((frame.width(), frame.height(), f, c))
            })
            .collect();
        for (offset, result) in detected.into_iter().enumerate() {
            let i = start + offset;
            let (w, h, features, colors) = result?;
            if i == 0 {
                dims = (w, h);
            } else if (w, h) != dims {
                return Err(KeyframeError::DimensionMismatch {
                    index: i,
                    want_w: dims.0,
                    want_h: dims.1,
                    got_w: w,
                    got_h: h,
                });
            }
            selector.push(i, features, colors);
        }
        start = end;
    }
    Ok(selector.finish(dims.0, dims.1))
}

/// Detect features on every frame (parallel, order preserved); useful for
/// evaluating several policies on the same sequence.
pub fn detect_all<S: FrameSource + ?Sized>(
    frames: &S,
    cfg: &DetectorConfig,
) -> Result<Vec<(Features, Vec<[u8; 3]>)>, KeyframeError> {
    cfg.validate()?;
    (0..frames.len())
        .into_par_iter()
        .map(|i| Ok(detect_frame(&frames.frame(i)?, cfg)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_formatting() {
        assert_eq!(keyframe_stats(867, 3675).to_string(), "867 (23.59%)");
        assert_eq!(keyframe_stats(964, 964).to_string(), "964 (100.00%)");
        assert_eq!(keyframe_stats(853, 964).to_string(), "853 (88.49%)");
        assert_eq!(keyframe_stats(2, 30).to_string(), "2 (6.67%)");
    }

    #[test]
    fn policy_validation() {
        let p = KeyframePolicy {
            inlier_threshold: 7,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        KeyframePolicy::default().validate().unwrap();
    }

    #[test]
    fn empty_sequence() {
        let frames: Vec<Frame> = Vec::new();
        assert!(matches!(
            select_keyframes(&frames, &DetectorConfig::default(), &KeyframePolicy::default()),
            Err(KeyframeError::EmptySequence)
        ));
    }
}
