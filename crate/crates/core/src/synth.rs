//! Synthetic ground truth: scenes, camera trajectories, rendered frames and
//! exact observations.
//!
//! The world is y-up. A scene is an open-topped room shell (floor and four
//! walls) plus a few solid boxes standing on the floor ("evidence objects")
//! that make the structure non-planar. Cameras always look at the room's
//! center. Every point lies on an oriented surface and is only seen from the
//! front (back-face culling); occlusion between surfaces is ignored.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor, Features, Keypoint};
use crate::geometry::{self, CameraIntrinsics, CameraPose, PixelPoint, Point3, SimilarityTransform};
use crate::image::{save_rgb, ImageError, RgbImage};
use crate::keyframing::{Keyframe, KeyframeSet};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synthetic scene parameters: {0}")]
    BadParameters(String),
    #[error("need at least 4 entities to compare against ground truth, got {0}")]
    TooFewEntities(usize),
    #[error("ground-truth alignment is degenerate")]
    Degenerate,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::BadParameters(_) => "bad_parameters",
            SynthError::TooFewEntities(_) => "too_few_entities",
            SynthError::Degenerate => "degenerate_configuration",
            SynthError::Image(_) => "image_io",
            SynthError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    /// Circle around the room center at a fixed angular step per camera.
    Orbit,
    /// Circular arc of fixed total span, divided evenly between cameras.
    Arc,
    /// Straight sideways translation with fixed orientation (a pan).
    Line,
}

impl std::str::FromStr for Trajectory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orbit" => Ok(Trajectory::Orbit),
            "arc" => Ok(Trajectory::Arc),
            "line" => Ok(Trajectory::Line),
            other => Err(format!("unknown trajectory '{other}' (expected orbit, arc or line)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_points: usize,
    pub n_cameras: usize,
    pub trajectory: Trajectory,
    pub noise_px: f64,
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    /// Orbit: degrees between consecutive cameras.
    pub orbit_step_deg: f64,
    /// Arc: total angular span in degrees.
    pub arc_span_deg: f64,
    /// Line: distance between consecutive cameras, scene units.
    pub line_step: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 1,
            n_points: 1000,
            n_cameras: 20,
            trajectory: Trajectory::Orbit,
            noise_px: 0.0,
            width: 640,
            height: 480,
            focal_px: 500.0,
            orbit_step_deg: 3.0,
            arc_span_deg: 40.0,
            line_step: 0.1,
        }
    }
}

// Room shell extents; floor at y = 0.
const ROOM_HALF_X: f64 = 2.0;
const ROOM_HALF_Z: f64 = 1.5;
const ROOM_HEIGHT: f64 = 1.6;
const OBJECT_FRACTION: f64 = 0.2;
const ORBIT_RADIUS: f64 = 4.5;
const CAMERA_HEIGHT: f64 = 3.0;
/// World radius of a rendered blob; about 1.3 to 2.2 px at orbit distance.
const BLOB_RADIUS: (f64, f64) = (0.012, 0.02);
const MIN_VIEW_DEPTH: f64 = 0.1;
/// Surfaces seen at grazing angles or from behind carry no visible points.
const MIN_FACING_COSINE: f64 = 0.1;
const MAX_POINT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthCamera {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

/// One point seen by one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: usize,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub params: SynthParams,
    pub points: Vec<Point3>,
    /// Surface normal of each point; points are only visible from the side
    /// the normal faces.
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    /// Blob radius of each point in scene units (rendering only).
    pub radii: Vec<f64>,
    pub cameras: Vec<SynthCamera>,
    /// Per camera, observations sorted by point index; noisy when
    /// `noise_px > 0`.
    pub observations: Vec<Vec<Observation>>,
}

struct Room {
    objects: Vec<(Point3, Vector3<f64>)>,
}

impl Room {
    fn new(rng: &mut SplitMix64) -> Room {
        // Three boxes on the floor: (min corner, size).
        let objects = (0..3)
            .map(|_| {
                let size = Vector3::new(rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.6), rng.uniform(0.3, 0.7));
                let min = Point3::new(
                    rng.uniform(-ROOM_HALF_X + 0.3, ROOM_HALF_X - 0.3 - size.x),
                    0.0,
                    rng.uniform(-ROOM_HALF_Z + 0.3, ROOM_HALF_Z - 0.3 - size.z),
                );
                (min, size)
            })
            .collect();
        Room { objects }
    }

    /// A surface point and its outward normal (towards the room interior for
    /// the shell).
    fn sample(&self, rng: &mut SplitMix64) -> (Point3, Vector3<f64>) {
        if rng.next_f64() < OBJECT_FRACTION {
            let (min, size) = self.objects[rng.below(self.objects.len())];
            // Top and four sides; the bottom rests on the floor.
            let areas = [size.x * size.z, size.x * size.y, size.x * size.y, size.z * size.y, size.z * size.y];
            let (a, b) = (rng.next_f64(), rng.next_f64());
            let max = min + size;
            return match pick_face(rng, &areas) {
                0 => (Point3::new(min.x + a * size.x, max.y, min.z + b * size.z), Vector3::y()),
                1 => (Point3::new(min.x + a * size.x, min.y + b * size.y, min.z), -Vector3::z()),
                2 => (Point3::new(min.x + a * size.x, min.y + b * size.y, max.z), Vector3::z()),
                3 => (Point3::new(min.x, min.y + b * size.y, min.z + a * size.z), -Vector3::x()),
                _ => (Point3::new(max.x, min.y + b * size.y, min.z + a * size.z), Vector3::x()),
            };
        }
        let (wx, wz, h) = (2.0 * ROOM_HALF_X, 2.0 * ROOM_HALF_Z, ROOM_HEIGHT);
        let areas = [wx * wz, wx * h, wx * h, wz * h, wz * h];
        let (a, b) = (rng.next_f64(), rng.next_f64());
        let x = -ROOM_HALF_X + a * wx;
        let z = -ROOM_HALF_Z + b * wz;
        let y = b * h;
        match pick_face(rng, &areas) {
            0 => (Point3::new(x, 0.0, z), Vector3::y()),
            1 => (Point3::new(x, y, -ROOM_HALF_Z), Vector3::z()),
            2 => (Point3::new(x, y, ROOM_HALF_Z), -Vector3::z()),
            3 => (Point3::new(-ROOM_HALF_X, y, -ROOM_HALF_Z + a * wz), Vector3::x()),
            _ => (Point3::new(ROOM_HALF_X, y, -ROOM_HALF_Z + a * wz), -Vector3::x()),
        }
    }
}

fn pick_face(rng: &mut SplitMix64, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut pick = rng.next_f64() * total;
    let mut face = 0;
    while face < areas.len() - 1 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    face
}

/// Point every camera looks at.
pub fn room_center() -> Point3 {
    Point3::new(0.0, 0.25 * ROOM_HEIGHT, 0.0)
}

fn camera_poses(p: &SynthParams) -> Vec<CameraPose> {
    let target = room_center();
    let up = Vector3::y();
    let n = p.n_cameras;
    (0..n)
        .map(|i| match p.trajectory {
            Trajectory::Orbit => {
                let theta = (i as f64 * p.orbit_step_deg).to_radians();
                let eye = Point3::new(ORBIT_RADIUS * theta.sin(), CAMERA_HEIGHT, ORBIT_RADIUS * theta.cos());
                CameraPose::look_at(&eye, &target, &up)
            }
            Trajectory::Arc => {
                let span = p.arc_span_deg.to_radians();
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                let theta = -0.5 * span + t * span;
                let r = 1.3 * ORBIT_RADIUS;
                let eye = Point3::new(r * theta.sin(), 0.8 * CAMERA_HEIGHT, r * theta.cos());
                CameraPose::look_at(&eye, &target, &up)
            }
            Trajectory::Line => {
                let start = Point3::new(0.0, CAMERA_HEIGHT, ORBIT_RADIUS);
                let rotation = CameraPose::look_at(&start, &target, &up).rotation;
                let x0 = -0.5 * p.line_step * (n as f64 - 1.0);
                let eye = Point3::new(x0 + i as f64 * p.line_step, CAMERA_HEIGHT, ORBIT_RADIUS);
                CameraPose::from_center(rotation, &eye)
            }
        })
        .collect()
}

/// Projection of a surface point if it lies in the frame and faces the camera.
fn in_view(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    p: &Point3,
    normal: &Vector3<f64>,
    width: usize,
    height: usize,
) -> Option<PixelPoint> {
    if pose.depth(p) < MIN_VIEW_DEPTH {
        return None;
    }
    let to_eye = (pose.center() - p).normalize();
    if normal.dot(&to_eye) < MIN_FACING_COSINE {
        return None;
    }
    let px = geometry::project(p, pose, k).ok()?;
    let inside = px.x >= 0.0 && px.y >= 0.0 && px.x <= (width - 1) as f64 && px.y <= (height - 1) as f64;
    inside.then_some(px)
}

/// Generate a scene. Points are rejection-sampled until each is visible in at
/// least two cameras.
pub fn generate_scene(params: &SynthParams) -> Result<SynthScene, SynthError> {
    let p = params;
    if p.n_points < 8 {
        return Err(SynthError::BadParameters(format!("n_points = {} < 8", p.n_points)));
    }
    if p.n_cameras < 2 {
        return Err(SynthError::BadParameters(format!("n_cameras = {} < 2", p.n_cameras)));
    }
    if !(p.noise_px >= 0.0 && p.noise_px.is_finite()) || !(p.focal_px > 0.0) || p.width < 32 || p.height < 32 {
        return Err(SynthError::BadParameters(
            "noise must be >= 0, focal > 0 and the image at least 32x32".into(),
        ));
    }
    let k = CameraIntrinsics::pinhole(p.focal_px, p.width as f64 / 2.0, p.height as f64 / 2.0);
    let poses = camera_poses(p);
    let mut rng = SplitMix64::new(p.seed);
    let room = Room::new(&mut rng.fork(1));
    let mut point_rng = rng.fork(2);
    let mut style_rng = rng.fork(3);
    let mut noise_rng = rng.fork(4);

    let mut points = Vec::with_capacity(p.n_points);
    let mut normals = Vec::with_capacity(p.n_points);
    while points.len() < p.n_points {
        let mut accepted = None;
        for _ in 0..MAX_POINT_ATTEMPTS {
            let (candidate, normal) = room.sample(&mut point_rng);
            let views = poses
                .iter()
                .filter(|pose| in_view(&k, pose, &candidate, &normal, p.width, p.height).is_some())
                .count();
            if views >= 2 {
                accepted = Some((candidate, normal));
                break;
            }
        }
        let Some((pt, n)) = accepted else {
            return Err(SynthError::BadParameters(
                "trajectory leaves too little of the room visible in two cameras".into(),
            ));
        };
        points.push(pt);
        normals.push(n);
    }

    let colors: Vec<[u8; 3]> = (0..p.n_points)
        .map(|_| {
            let mut c = [0u8; 3];
            for ch in c.iter_mut() {
                *ch = style_rng.uniform(60.0, 256.0).floor().min(255.0) as u8;
            }
            c
        })
        .collect();
    let radii: Vec<f64> = (0..p.n_points)
        .map(|_| style_rng.uniform(BLOB_RADIUS.0, BLOB_RADIUS.1))
        .collect();

    let observations = poses
        .iter()
        .map(|pose| {
            points
                .iter()
                .zip(&normals)
                .enumerate()
                .filter_map(|(i, (pt, n))| {
                    in_view(&k, pose, pt, n, p.width, p.height).map(|px| Observation {
                        point: i,
                        pixel: PixelPoint::new(
                            px.x + p.noise_px * noise_rng.gaussian(),
                            px.y + p.noise_px * noise_rng.gaussian(),
                        ),
                    })
                })
                .collect()
        })
        .collect();

    Ok(SynthScene {
        params: p.clone(),
        points,
        normals,
        colors,
        radii,
        cameras: poses
            .into_iter()
            .map(|pose| SynthCamera { pose, intrinsics: k })
            .collect(),
        observations,
    })
}

impl SynthScene {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.cameras[0].intrinsics
    }

    pub fn camera_centers(&self) -> Vec<Point3> {
        self.cameras.iter().map(|c| c.pose.center()).collect()
    }

    /// Largest distance between two scene points.
    pub fn diameter(&self) -> f64 {
        let mut best = 0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }

    /// Render one camera's frame: each observed point becomes a Gaussian blob
    /// of its color on a black background, centred on its (noisy) observation.
    pub fn render(&self, camera: usize) -> RgbImage {
        let (w, h) = (self.params.width, self.params.height);
        let cam = &self.cameras[camera];
        let mut acc = vec![[0f32; 3]; w * h];
        for obs in &self.observations[camera] {
            let depth = cam.pose.depth(&self.points[obs.point]);
            let sigma = cam.intrinsics.fx * self.radii[obs.point] / depth;
            let reach = (3.5 * sigma).ceil() as isize;
            let (cu, cv) = (obs.pixel.x, obs.pixel.y);
            let color = self.colors[obs.point].map(|c| c as f32 / 255.0);
            let inv = -1.0 / (2.0 * sigma * sigma);
            let (x0, y0) = (cu.round() as isize, cv.round() as isize);
            for y in (y0 - reach).max(0)..=(y0 + reach).min(h as isize - 1) {
                for x in (x0 - reach).max(0)..=(x0 + reach).min(w as isize - 1) {
                    let d2 = (x as f64 - cu).powi(2) + (y as f64 - cv).powi(2);
                    let g = (d2 * inv).exp() as f32;
                    let px = &mut acc[y as usize * w + x as usize];
                    for c in 0..3 {
                        px[c] += g * color[c];
                    }
                }
            }
        }
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = acc[y * w + x].map(|c| (c.min(1.0) * 255.0).round() as u8);
                img.set(x, y, v);
            }
        }
        img
    }

    pub fn render_frames(&self) -> Vec<RgbImage> {
        (0..self.cameras.len()).map(|i| self.render(i)).collect()
    }

    /// Every camera as a keyframe whose features are the observations
    /// themselves, bypassing rendering and detection. Keypoint `i` of camera
    /// `c` is `observations[c][i]`; its descriptor is a random unit vector
    /// fixed per point plus a small per-view perturbation, so descriptor
    /// matching recovers the true correspondences.
    pub fn observation_keyframes(&self, seed: u64) -> KeyframeSet {
        const DIM: usize = 32;
        const JITTER: f64 = 0.02;
        let mut rng = SplitMix64::new(seed);
        let base: Vec<Vec<f64>> = (0..self.points.len())
            .map(|_| (0..DIM).map(|_| rng.gaussian()).collect())
            .collect();
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Descriptor(v.iter().map(|x| (x / n) as f32).collect())
        };
        let keyframes = self
            .observations
            .iter()
            .enumerate()
            .map(|(c, obs)| {
                let mut view = rng.fork(c as u64);
                let keypoints = obs
                    .iter()
                    .map(|o| Keypoint {
                        u: o.pixel.x,
                        v: o.pixel.y,
                        octave: 0,
                        scale: 1.6,
                        orientation: 0.0,
                        response: 1.0,
                    })
                    .collect();
                let descriptors = obs
                    .iter()
                    .map(|o| {
                        let b = &base[o.point];
                        let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        unit(b.iter().map(|x| x / n + JITTER * view.gaussian()).collect())
                    })
                    .collect();
                Keyframe {
                    frame_index: c,
                    features: Features { keypoints, descriptors },
                    colors: obs.iter().map(|o| self.colors[o.point]).collect(),
                }
            })
            .collect();
        KeyframeSet {
            frame_indices: (0..self.cameras.len()).collect(),
            trigger_inlier_counts: vec![0; self.cameras.len()],
            keyframes,
            total_frames: self.cameras.len(),
            width: self.params.width,
            height: self.params.height,
        }
    }

    /// Write `frame_NNNN.ppm`, `intrinsics.json` and `ground_truth_path.txt`.
    pub fn write_frames(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        for i in 0..self.cameras.len() {
            save_rgb(&self.render(i), &dir.join(format!("frame_{i:04}.ppm")))?;
        }
        let k = serde_json::to_string_pretty(&self.intrinsics()).expect("intrinsics serialize");
        std::fs::write(dir.join("intrinsics.json"), k + "\n")?;
        let path: Vec<(usize, CameraPose)> = self.cameras.iter().map(|c| c.pose).enumerate().collect();
        std::fs::write(dir.join("ground_truth_path.txt"), crate::sfm::format_camera_path(&path))?;
        Ok(())
    }
}

/// Best-fit similarity from estimated to true positions and the RMSE after
/// alignment, in ground-truth units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFit {
    pub transform: SimilarityTransform,
    pub rmse: f64,
}

pub fn compare_to_ground_truth(estimated: &[Point3], truth: &[Point3]) -> Result<GroundTruthFit, SynthError> {
    assert_eq!(estimated.len(), truth.len(), "entity count mismatch");
    if estimated.len() < 4 {
        return Err(SynthError::TooFewEntities(estimated.len()));
    }
    let transform = geometry::umeyama(estimated, truth, true).ok_or(SynthError::Degenerate)?;
    let sum: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| (transform.apply(e) - t).norm_squared())
        .sum();
    Ok(GroundTruthFit {
        transform,
        rmse: (sum / estimated.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FundamentalMatrix;

    fn small(trajectory: Trajectory) -> SynthParams {
        SynthParams {
            n_points: 200,
            n_cameras: 8,
            trajectory,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let a = generate_scene(&small(Trajectory::Orbit)).unwrap();
        let b = generate_scene(&small(Trajectory::Orbit)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SynthParams { seed: 2, ..small(Trajectory::Orbit) }).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn exact_observations_reproject() {
        for t in [Trajectory::Orbit, Trajectory::Arc, Trajectory::Line] {
            let s = generate_scene(&small(t)).unwrap();
            for (cam, obs) in s.cameras.iter().zip(&s.observations) {
                for o in obs {
                    let p = geometry::project(&s.points[o.point], &cam.pose, &cam.intrinsics).unwrap();
                    assert!((p - o.pixel).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn every_point_seen_twice() {
        let s = generate_scene(&small(Trajectory::Line)).unwrap();
        let mut seen = vec![0; s.points.len()];
        for obs in &s.observations {
            for o in obs {
                seen[o.point] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n >= 2));
    }

    #[test]
    fn bad_parameters() {
        let p = SynthParams { n_points: 7, ..Default::default() };
        assert!(matches!(generate_scene(&p), Err(SynthError::BadParameters(_))));
        let p = SynthParams { n_cameras: 1, ..Default::default() };
        assert!(matches!(generate_scene(&p), Err(SynthError::BadParameters(_))));
    }

    #[test]
    fn orbit_parallax_at_least_one_degree() {
        let s = generate_scene(&SynthParams { n_cameras: 20, ..Default::default() }).unwrap();
        for pair in s.cameras.windows(2) {
            let (ca, cb) = (pair[0].pose.center(), pair[1].pose.center());
            let mut angles: Vec<f64> = s
                .points
                .iter()
                .map(|p| {
                    let (a, b) = (ca - p, cb - p);
                    (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
                })
                .collect();
            angles.sort_by(f64::total_cmp);
            assert!(angles[angles.len() / 2] >= 1.0, "median parallax {}", angles[angles.len() / 2]);
        }
    }

    #[test]
    fn noise_free_observations_satisfy_epipolar_constraint() {
        let s = generate_scene(&small(Trajectory::Arc)).unwrap();
        let k = s.intrinsics().matrix();
        let kinv = k.try_inverse().unwrap();
        let (a, b) = (&s.cameras[0].pose, &s.cameras[3].pose);
        let rel = a.relative_to(b);
        let e = geometry::skew(&rel.translation) * rel.rotation;
        let f = FundamentalMatrix(kinv.transpose() * e * kinv);
        let f = f.0 / f.0.norm();
        for oa in &s.observations[0] {
            if let Some(ob) = s.observations[3].iter().find(|o| o.point == oa.point) {
                let xa = nalgebra::Vector3::new(oa.pixel.x, oa.pixel.y, 1.0);
                let xb = nalgebra::Vector3::new(ob.pixel.x, ob.pixel.y, 1.0);
                assert!((xb.transpose() * f * xa)[0].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blobs_centred_on_projections() {
        let s = generate_scene(&SynthParams { n_points: 60, n_cameras: 3, ..Default::default() }).unwrap();
        let img = s.render(0);
        let gray = img.to_gray();
        let cam = &s.cameras[0];
        // Only isolated blobs: the intensity centroid of a merged pair is not
        // either blob's center.
        let mut checked = 0;
        for o in &s.observations[0] {
            let isolated = s.observations[0]
                .iter()
                .all(|q| q.point == o.point || (q.pixel - o.pixel).norm() > 12.0);
            let (u, v) = (o.pixel.x.round() as isize, o.pixel.y.round() as isize);
            if !isolated || u < 6 || v < 6 || u >= 634 || v >= 474 {
                continue;
            }
            let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
            for y in v - 5..=v + 5 {
                for x in u - 5..=u + 5 {
                    let g = gray.get(x as usize, y as usize) as f64;
                    sw += g;
                    su += g * x as f64;
                    sv += g * y as f64;
                }
            }
            let truth = geometry::project(&s.points[o.point], &cam.pose, &cam.intrinsics).unwrap();
            let c = PixelPoint::new(su / sw, sv / sw);
            assert!((c - truth).norm() < 0.5, "blob at {c} vs {truth}");
            checked += 1;
        }
        assert!(checked >= 20, "{checked}");
    }

    #[test]
    fn empty_scene_renders_black() {
        let mut s = generate_scene(&small(Trajectory::Orbit)).unwrap();
        s.observations.iter_mut().for_each(|o| o.clear());
        let img = s.render(0);
        assert!(img.to_gray().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ground_truth_comparison() {
        let s = generate_scene(&small(Trajectory::Orbit)).unwrap();
        let truth = s.camera_centers();
        let gauge = SimilarityTransform::new(0.3, geometry::exp_so3(&Vector3::new(0.2, -1.0, 0.4)), Vector3::new(1.0, 2.0, 3.0));
        let est: Vec<Point3> = truth.iter().map(|p| gauge.apply(p)).collect();
        let fit = compare_to_ground_truth(&est, &truth).unwrap();
        assert!(fit.rmse < 1e-9);

        // Displacing one of n entities by d gives an RMSE close to d / sqrt(n)
        // once the similarity fit absorbs part of the displacement.
        let mut moved = est.clone();
        let d = 0.01;
        moved[3].x += d * gauge.scale;
        let fit = compare_to_ground_truth(&moved, &truth).unwrap();
        let n = truth.len() as f64;
        assert!(fit.rmse <= d / n.sqrt() + 1e-12 && fit.rmse > 0.7 * d / n.sqrt(), "{}", fit.rmse);

        assert!(matches!(
            compare_to_ground_truth(&est[..3], &truth[..3]),
            Err(SynthError::TooFewEntities(3))
        ));
    }
}
