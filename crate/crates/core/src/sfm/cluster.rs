use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use super::{
    build_tracks, init_two_view, partition_clusters, register_pose, ClusterPlan, Reconstruction, SfmError,
    SfmParams, Track,
};
use crate::bundle::{solve_lm, BAObservation, BAProblem, BAReport};
use crate::geometry::{triangulate, CameraIntrinsics, CameraPose, PixelPoint, Point3};
use crate::keyframing::{Keyframe, KeyframeSet};

/// Observation-pruning threshold between intermediate adjustments, as a
/// multiple of the final cutoff.
const INTERMEDIATE_CUTOFF_FACTOR: f64 = 2.0;
const MIN_RESECTION_TRACKS: usize = 6;
/// Seed points are accepted up to this multiple of the final cutoff: the
/// pose lifted from the fundamental matrix can be a few pixels off until the
/// first adjustment.
const SEED_CUTOFF_FACTOR: f64 = 5.0;

struct State<'a> {
    keyframes: &'a [Keyframe],
    k: CameraIntrinsics,
    params: &'a SfmParams,
    tracks: Vec<Track>,
    poses: Vec<Option<CameraPose>>,
    /// Registration order; the first two are the seed pair.
    order: Vec<usize>,
    /// keyframe -> keypoint -> track
    lookup: Vec<HashMap<usize, usize>>,
    reports: Vec<BAReport>,
}

impl State<'_> {
    fn pixel(&self, kf: usize, kp: usize) -> PixelPoint {
        self.keyframes[kf].features.keypoints[kp].position()
    }

    fn error(&self, kf: usize, kp: usize, x: &Point3) -> Option<f64> {
        let pose = self.poses[kf]?;
        let pc = pose.transform(x);
        if pc.z <= 0.0 {
            return None;
        }
        self.k.project_camera_point(&pc).ok().map(|(p, _)| (p - self.pixel(kf, kp)).norm())
    }

    fn detach(&mut self, t: usize, kf: usize) {
        let track = &mut self.tracks[t];
        track.observations.retain(|o| o.0 != kf);
        self.lookup[kf].retain(|_, v| *v != t);
        if track.observations.len() < 2 {
            track.point = None;
        }
    }

    fn registered_obs(&self, t: usize) -> Vec<(usize, usize)> {
        self.tracks[t]
            .observations
            .iter()
            .copied()
            .filter(|&(kf, _)| self.poses[kf].is_some())
            .collect()
    }

    /// Triangulate from the registered pair with the widest ray angle and
    /// keep the point if it is in front of and reprojects within `cutoff` in
    /// every registered view.
    fn try_triangulate(&mut self, t: usize, cutoff: f64) -> bool {
        let obs = self.registered_obs(t);
        if obs.len() < 2 {
            return false;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                let (a, b) = (obs[i], obs[j]);
                let (pa, pb) = (self.poses[a.0].unwrap(), self.poses[b.0].unwrap());
                let ra = pa.rotation.transpose() * self.k.bearing(self.pixel(a.0, a.1));
                let rb = pb.rotation.transpose() * self.k.bearing(self.pixel(b.0, b.1));
                let angle = ra.dot(&rb).clamp(-1.0, 1.0).acos().to_degrees();
                if best.map_or(true, |(b, _, _)| angle > b) {
                    best = Some((angle, i, j));
                }
            }
        }
        let (angle, i, j) = best.unwrap();
        if angle < self.params.min_triangulation_deg {
            return false;
        }
        let (a, b) = (obs[i], obs[j]);
        let Ok(x) = triangulate(
            &self.pixel(a.0, a.1),
            &self.pixel(b.0, b.1),
            &self.poses[a.0].unwrap(),
            &self.poses[b.0].unwrap(),
            &self.k,
        ) else {
            return false;
        };
        if obs.iter().any(|&(kf, kp)| self.error(kf, kp, &x).map_or(true, |e| e > cutoff)) {
            return false;
        }
        self.tracks[t].point = Some(x);
        true
    }

    fn bundle_adjust(&mut self) -> Result<(), SfmError> {
        let cam_index: HashMap<usize, usize> = self.order.iter().enumerate().map(|(i, &kf)| (kf, i)).collect();
        let cameras: Vec<CameraPose> = self.order.iter().map(|&kf| self.poses[kf].unwrap()).collect();
        let mut point_tracks = Vec::new();
        let mut points = Vec::new();
        let mut observations = Vec::new();
        for (t, track) in self.tracks.iter().enumerate() {
            let Some(x) = track.point else {
                continue;
            };
            let j = points.len();
            point_tracks.push(t);
            points.push(x);
            for &(kf, kp) in &track.observations {
                if let Some(&c) = cam_index.get(&kf) {
                    observations.push(BAObservation {
                        camera: c,
                        point: j,
                        pixel: self.pixel(kf, kp),
                    });
                }
            }
        }
        let mut problem = BAProblem::new(cameras, points, self.k, observations);
        let report = solve_lm(&mut problem, &self.params.ba)?;
        for (i, &kf) in self.order.iter().enumerate() {
            self.poses[kf] = Some(problem.cameras[i]);
        }
        for (j, &t) in point_tracks.iter().enumerate() {
            self.tracks[t].point = Some(problem.points[j]);
        }
        log::debug!(
            "bundle adjustment: {} cameras, {} points, rms {:.3} -> {:.3} px",
            self.order.len(),
            point_tracks.len(),
            report.initial_rms_px,
            report.final_rms_px
        );
        self.reports.push(report);
        Ok(())
    }

    /// Detach registered observations reprojecting worse than `cutoff`;
    /// tracks left with fewer than two registered views lose their point.
    fn prune(&mut self, cutoff: f64) -> usize {
        let mut removed = 0;
        for t in 0..self.tracks.len() {
            let Some(x) = self.tracks[t].point else {
                continue;
            };
            let bad: Vec<usize> = self
                .registered_obs(t)
                .into_iter()
                .filter(|&(kf, kp)| self.error(kf, kp, &x).map_or(true, |e| e >= cutoff))
                .map(|(kf, _)| kf)
                .collect();
            for kf in bad {
                self.detach(t, kf);
                removed += 1;
            }
            if self.registered_obs(t).len() < 2 {
                self.tracks[t].point = None;
            }
        }
        removed
    }

    /// Drop the points of tracks seen by fewer than `min_len` registered
    /// views; they stay untriangulated.
    fn drop_short(&mut self, min_len: usize) -> usize {
        let mut dropped = 0;
        for t in 0..self.tracks.len() {
            if self.tracks[t].point.is_some() && self.registered_obs(t).len() < min_len {
                self.tracks[t].point = None;
                dropped += 1;
            }
        }
        dropped
    }

    fn register(&mut self, kf: usize) -> Result<(), SfmError> {
        let mut ids = Vec::new();
        let (mut pts, mut pix) = (Vec::new(), Vec::new());
        let mut entries: Vec<(&usize, &usize)> = self.lookup[kf].iter().collect();
        entries.sort_unstable();
        for (&kp, &t) in entries {
            if let Some(x) = self.tracks[t].point {
                ids.push(t);
                pts.push(x);
                pix.push(self.pixel(kf, kp));
            }
        }
        let r = register_pose(&pts, &pix, &self.k, self.params.resection_epsilon_px, self.params.seed)?;
        self.poses[kf] = Some(r.pose);
        self.order.push(kf);
        for (t, inlier) in ids.into_iter().zip(r.inliers) {
            if !inlier {
                self.detach(t, kf);
            }
        }
        Ok(())
    }

    fn point_count(&self) -> usize {
        self.tracks.iter().filter(|t| t.point.is_some()).count()
    }

    fn triangulated_in(&self, kf: usize) -> usize {
        self.lookup[kf]
            .values()
            .filter(|&&t| self.tracks[t].point.is_some())
            .count()
    }
}

/// Reconstruct one cluster of keyframes.
///
/// Tracks are built from windowed pairwise matches. The seed is the pair
/// with the most verified matches whose median triangulation angle reaches
/// `min_seed_parallax_deg`. Remaining keyframes are registered greedily by
/// the number of triangulated tracks they observe, new tracks are
/// triangulated after every registration, and bundle adjustment runs every
/// `ba_every` registrations and at the end.
pub fn reconstruct_cluster(
    keyframes: &[Keyframe],
    cluster_id: usize,
    k: &CameraIntrinsics,
    params: &SfmParams,
) -> Result<Reconstruction, SfmError> {
    params.validate()?;
    if keyframes.len() < 2 {
        return Err(SfmError::InitializationFailed(format!(
            "cluster {cluster_id} has {} keyframe(s)",
            keyframes.len()
        )));
    }
    let set = build_tracks(keyframes, params);
    let n = keyframes.len();
    let mut lookup = vec![HashMap::new(); n];
    for (t, track) in set.tracks.iter().enumerate() {
        for &(kf, kp) in &track.observations {
            lookup[kf].insert(kp, t);
        }
    }
    let mut st = State {
        keyframes,
        k: *k,
        params,
        tracks: set.tracks,
        poses: vec![None; n],
        order: Vec::new(),
        lookup,
        reports: Vec::new(),
    };

    let mut candidates: Vec<_> = set
        .pairs
        .iter()
        .filter(|p| p.matches.len() >= params.min_pair_inliers)
        .collect();
    candidates.sort_by(|x, y| y.matches.len().cmp(&x.matches.len()).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut seed = None;
    for pair in candidates {
        let pa: Vec<PixelPoint> = pair.matches.iter().map(|&(i, _)| st.pixel(pair.a, i)).collect();
        let pb: Vec<PixelPoint> = pair.matches.iter().map(|&(_, j)| st.pixel(pair.b, j)).collect();
        match init_two_view(&pa, &pb, k, params) {
            Ok(tv) if tv.median_parallax_deg >= params.min_seed_parallax_deg => {
                seed = Some((pair, tv));
                break;
            }
            Ok(tv) => log::debug!(
                "pair ({}, {}): median parallax {:.2} deg too small",
                pair.a,
                pair.b,
                tv.median_parallax_deg
            ),
            Err(e) => log::debug!("pair ({}, {}): {e}", pair.a, pair.b),
        }
    }
    let Some((pair, tv)) = seed else {
        return Err(SfmError::InitializationFailed(format!(
            "cluster {cluster_id}: no keyframe pair with >= {} inliers and median parallax >= {} deg",
            params.min_pair_inliers, params.min_seed_parallax_deg
        )));
    };
    st.poses[pair.a] = Some(CameraPose::identity());
    st.poses[pair.b] = Some(tv.pose_b);
    st.order = vec![pair.a, pair.b];
    let cutoff = INTERMEDIATE_CUTOFF_FACTOR * params.max_reprojection_px;
    for t in 0..st.tracks.len() {
        st.try_triangulate(t, SEED_CUTOFF_FACTOR * params.max_reprojection_px);
    }
    st.bundle_adjust()?;
    st.prune(cutoff);
    log::debug!(
        "cluster {cluster_id}: seed ({}, {}) with {} inliers, {} points",
        pair.a,
        pair.b,
        tv.inlier_count(),
        st.point_count()
    );

    let mut failed = BTreeSet::new();
    let mut since_ba = 0;
    loop {
        let next = (0..n)
            .filter(|&kf| st.poses[kf].is_none() && !failed.contains(&kf))
            .map(|kf| (st.triangulated_in(kf), kf))
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((count, kf)) = next else {
            break;
        };
        if count < MIN_RESECTION_TRACKS {
            break;
        }
        if let Err(e) = st.register(kf) {
            log::debug!("cluster {cluster_id}: keyframe {kf} not registered: {e}");
            failed.insert(kf);
            continue;
        }
        let pending: Vec<usize> = st.lookup[kf]
            .values()
            .copied()
            .filter(|&t| st.tracks[t].point.is_none())
            .collect();
        for t in pending {
            st.try_triangulate(t, cutoff);
        }
        since_ba += 1;
        if since_ba == params.ba_every {
            st.bundle_adjust()?;
            st.prune(INTERMEDIATE_CUTOFF_FACTOR * params.max_reprojection_px);
            since_ba = 0;
        }
    }

    st.bundle_adjust()?;
    let min_len = params.min_track_length.min(st.order.len()).max(2);
    if st.prune(params.max_reprojection_px) + st.drop_short(min_len) > 0 {
        st.bundle_adjust()?;
        st.prune(params.max_reprojection_px);
        st.drop_short(min_len);
    }
    Ok(finish(st, cluster_id, (pair.a, pair.b)))
}

fn finish(st: State, cluster_id: usize, seed: (usize, usize)) -> Reconstruction {
    let frame = |kf: usize| st.keyframes[kf].frame_index;
    // Re-express everything in the frame of the lowest registered keyframe.
    // The motion is rigid, so the seed baseline keeps unit length.
    let first = st.poses.iter().position(|p| p.is_some()).expect("seed registered");
    let reference = st.poses[first].unwrap();
    let to_world = |x: &Point3| Point3::from(reference.transform(x));
    let mut poses = BTreeMap::new();
    for (kf, pose) in st.poses.iter().enumerate() {
        if let Some(p) = pose {
            let rotation = p.rotation * reference.rotation.transpose();
            let translation = p.translation - rotation * reference.translation;
            poses.insert(frame(kf), CameraPose::new(rotation, translation));
        }
    }
    let mut tracks = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for (t, track) in st.tracks.iter().enumerate() {
        let Some(x) = track.point else {
            continue;
        };
        let obs = st.registered_obs(t);
        for &(kf, kp) in &obs {
            if let Some(e) = st.error(kf, kp, &x) {
                sum += e;
                count += 1;
            }
        }
        tracks.push(Track {
            observations: obs.iter().map(|&(kf, kp)| (frame(kf), kp)).collect(),
            point: Some(to_world(&x)),
            color: track.color,
        });
    }
    log::info!(
        "cluster {cluster_id}: {} of {} keyframes registered, {} points",
        poses.len(),
        st.keyframes.len(),
        tracks.len()
    );
    Reconstruction {
        cluster_id,
        poses,
        intrinsics: st.k,
        tracks,
        mean_reproj_error_px: if count > 0 { sum / count as f64 } else { 0.0 },
        seed_pair: (frame(seed.0), frame(seed.1)),
        ba_reports: st.reports,
    }
}

/// Partition the keyframes and reconstruct every cluster in parallel.
pub fn reconstruct_all(
    keyframes: &KeyframeSet,
    k: &CameraIntrinsics,
    params: &SfmParams,
) -> Result<(ClusterPlan, Vec<Result<Reconstruction, SfmError>>), SfmError> {
    params.validate()?;
    let plan = partition_clusters(keyframes.len(), params.cluster_size, params.cluster_overlap)?;
    let results = plan
        .clusters
        .par_iter()
        .enumerate()
        .map(|(id, range)| reconstruct_cluster(&keyframes.keyframes[range.clone()], id, k, params))
        .collect();
    Ok((plan, results))
}
