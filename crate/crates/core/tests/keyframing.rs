use std::sync::OnceLock;

use forensic3d::features::{DetectorConfig, Features};
use forensic3d::image::{Frame, RgbImage};
use forensic3d::keyframing::{
    count_inliers, detect_all, select_keyframes, FrameDir, KeyframeError, KeyframePolicy, KeyframeSelector,
};
use forensic3d::synth::{generate_scene, SynthParams, Trajectory};

type Detections = Vec<(Features, Vec<[u8; 3]>)>;

fn pan_params() -> SynthParams {
    SynthParams {
        seed: 1,
        n_cameras: 30,
        trajectory: Trajectory::Line,
        line_step: 0.12,
        ..Default::default()
    }
}

fn pan() -> &'static (Vec<Frame>, Detections) {
    static PAN: OnceLock<(Vec<Frame>, Detections)> = OnceLock::new();
    PAN.get_or_init(|| {
        let scene = generate_scene(&pan_params()).unwrap();
        let frames: Vec<Frame> = scene.render_frames().into_iter().map(Frame::from_rgb).collect();
        let det = detect_all(&frames, &DetectorConfig::default()).unwrap();
        (frames, det)
    })
}

fn select(det: &Detections, policy: KeyframePolicy) -> forensic3d::keyframing::KeyframeSet {
    let mut s = KeyframeSelector::new(policy, DetectorConfig::default().ratio_test);
    for (i, (f, c)) in det.iter().enumerate() {
        s.push(i, f.clone(), c.clone());
    }
    s.finish(640, 480)
}

fn small_frames(n: usize) -> Vec<Frame> {
    let scene = generate_scene(&SynthParams {
        n_points: 400,
        n_cameras: 2,
        width: 320,
        height: 240,
        focal_px: 500.0,
        ..Default::default()
    })
    .unwrap();
    let frame = Frame::from_rgb(scene.render(0));
    vec![frame; n]
}

#[test]
fn single_frame_is_the_only_keyframe() {
    let frames = small_frames(1);
    let ks = select_keyframes(&frames, &DetectorConfig::default(), &KeyframePolicy::default()).unwrap();
    assert_eq!(ks.frame_indices, vec![0]);
    assert_eq!(ks.stats().to_string(), "1 (100.00%)");
}

#[test]
fn identical_frames_never_trigger() {
    let frames = small_frames(50);
    let policy = KeyframePolicy::default();
    let f = detect_all(&frames[..1], &DetectorConfig::default()).unwrap();
    let self_inliers = count_inliers(&f[0].0, &f[0].0, 0.8, &policy);
    assert!(self_inliers > policy.inlier_threshold, "{self_inliers}");
    let ks = select_keyframes(&frames, &DetectorConfig::default(), &policy).unwrap();
    assert_eq!(ks.frame_indices, vec![0]);
    assert_eq!(ks.total_frames, 50);
}

#[test]
fn pan_second_keyframe_matches_direct_count() {
    let (frames, det) = pan();
    let policy = KeyframePolicy::default();
    // Independent oracle: inliers of every frame against frame 0.
    let first_below = (1..det.len())
        .find(|&i| count_inliers(&det[0].0, &det[i].0, 0.8, &policy) < policy.inlier_threshold)
        .unwrap();
    assert_eq!(first_below, 7);
    let ks = select_keyframes(frames, &DetectorConfig::default(), &policy).unwrap();
    assert_eq!(ks.frame_indices[0], 0);
    assert_eq!(ks.frame_indices[1], 7);
}

#[test]
fn skipped_frames_have_enough_inliers() {
    let (_, det) = pan();
    let policy = KeyframePolicy::default();
    let ks = select(det, policy);
    assert_eq!(ks.frame_indices[0], 0);
    assert!(ks.frame_indices.windows(2).all(|w| w[0] < w[1]));
    for (n, &k) in ks.frame_indices.iter().enumerate() {
        if n > 0 {
            assert!(ks.trigger_inlier_counts[n] < policy.inlier_threshold);
        }
        let next = ks.frame_indices.get(n + 1).copied().unwrap_or(det.len());
        for j in k + 1..next {
            let inliers = count_inliers(&det[k].0, &det[j].0, 0.8, &policy);
            assert!(inliers >= policy.inlier_threshold, "frame {j}: {inliers} against keyframe {k}");
        }
    }
}

#[test]
fn lowering_threshold_never_adds_keyframes() {
    let (_, det) = pan();
    let counts: Vec<usize> = [300, 250, 200, 150, 100, 50]
        .iter()
        .map(|&t| {
            select(
                det,
                KeyframePolicy {
                    inlier_threshold: t,
                    ..Default::default()
                },
            )
            .len()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn selection_is_deterministic() {
    let (_, det) = pan();
    let a = select(det, KeyframePolicy::default());
    let b = select(det, KeyframePolicy::default());
    assert_eq!(a, b);
}

#[test]
fn frame_directory_matches_in_memory_frames() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SynthParams {
        n_points: 400,
        n_cameras: 6,
        width: 320,
        height: 240,
        focal_px: 500.0,
        orbit_step_deg: 6.0,
        ..Default::default()
    })
    .unwrap();
    scene.write_frames(dir.path()).unwrap();
    let frames: Vec<Frame> = scene.render_frames().into_iter().map(Frame::from_rgb).collect();
    let cfg = DetectorConfig::default();
    let policy = KeyframePolicy::default();
    let from_dir = select_keyframes(&FrameDir::open(dir.path()).unwrap(), &cfg, &policy).unwrap();
    let in_memory = select_keyframes(&frames, &cfg, &policy).unwrap();
    assert_eq!(from_dir, in_memory);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let mut frames = small_frames(2);
    frames.push(Frame::from_rgb(RgbImage::new(64, 64)));
    let err = select_keyframes(&frames, &DetectorConfig::default(), &KeyframePolicy::default()).unwrap_err();
    assert!(matches!(err, KeyframeError::DimensionMismatch { index: 2, .. }), "{err}");
}
