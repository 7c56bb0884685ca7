use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector2, Vector3, Vector6};

use super::SfmError;
use crate::geometry::{exp_so3, skew, CameraIntrinsics, CameraPose, PixelPoint, Point3, MIN_DEPTH};
use crate::rng::SplitMix64;

const SAMPLE_SIZE: usize = 6;
const MAX_ITERS: usize = 2000;
const CONFIDENCE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Resection {
    pub pose: CameraPose,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl Resection {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Linear camera resection from at least six 3D points and their normalized
/// image coordinates. The 3D points are centred and scaled before solving.
pub fn dlt_resection(points: &[Point3], normalized: &[Vector2<f64>]) -> Option<CameraPose> {
    let n = points.len();
    if n < SAMPLE_SIZE || normalized.len() != n {
        return None;
    }
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mean_dist = points.iter().map(|p| (p.coords - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) {
        return None;
    }
    let s = 3f64.sqrt() / mean_dist;
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, x)) in points.iter().zip(normalized).enumerate() {
        let q = (p.coords - centroid) * s;
        let h = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -x.x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -x.y * h[j];
        }
    }
    let eig = (a.transpose() * &a).symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = eig.eigenvectors.column(min_idx);
    let pn = Matrix3x4::from_row_slice(v.as_slice());
    // Undo the normalization: P = Pn * [sI, -s c; 0 1].
    let mut t = nalgebra::Matrix4::<f64>::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-s * centroid));
    let mut p = pn * t;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let sv = svd.singular_values;
    if !(sv.min() > 1e-9 * sv.max()) {
        return None;
    }
    let scale = sv.sum() / 3.0;
    let rotation = u * vt;
    let translation: Vector3<f64> = p.column(3).into_owned() / scale;
    Some(CameraPose::new(rotation, translation))
}

fn reprojection_error(pose: &CameraPose, k: &CameraIntrinsics, x: &Point3, obs: &PixelPoint) -> Option<f64> {
    let pc = pose.transform(x);
    k.project_camera_point(&pc).ok().map(|(p, _)| (p - obs).norm())
}

fn inlier_mask(pose: &CameraPose, k: &CameraIntrinsics, pts: &[Point3], pix: &[PixelPoint], eps: f64) -> Vec<bool> {
    pts.iter()
        .zip(pix)
        .map(|(x, p)| reprojection_error(pose, k, x, p).is_some_and(|e| e < eps))
        .collect()
}

/// Gauss-Newton on the pixel reprojection error of the selected points,
/// stopping when a step no longer lowers the cost.
fn refine_pose(pose: &CameraPose, k: &CameraIntrinsics, pts: &[Point3], pix: &[PixelPoint]) -> CameraPose {
    let cost = |pose: &CameraPose| -> f64 {
        pts.iter()
            .zip(pix)
            .map(|(x, p)| reprojection_error(pose, k, x, p).map_or(f64::INFINITY, |e| e * e))
            .sum()
    };
    let mut pose = *pose;
    let mut current = cost(&pose);
    for _ in 0..20 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, obs) in pts.iter().zip(pix) {
            let pc = pose.transform(x);
            let Ok((pred, jproj)) = k.project_camera_point(&pc) else {
                continue;
            };
            let jr = jproj * -skew(&(pose.rotation * x.coords));
            let mut jm = nalgebra::Matrix2x6::<f64>::zeros();
            jm.fixed_view_mut::<2, 3>(0, 0).copy_from(&jr);
            jm.fixed_view_mut::<2, 3>(0, 3).copy_from(&jproj);
            let r = pred - obs;
            jtj += jm.transpose() * jm;
            jtr += jm.transpose() * r;
        }
        let Some(chol) = jtj.cholesky() else {
            break;
        };
        let d = chol.solve(&-jtr);
        let candidate = CameraPose::new(
            exp_so3(&Vector3::new(d[0], d[1], d[2])) * pose.rotation,
            pose.translation + Vector3::new(d[3], d[4], d[5]),
        );
        let c = cost(&candidate);
        if !(c < current) {
            break;
        }
        let converged = d.norm() < 1e-14 || (current - c) <= 1e-15 * current;
        pose = candidate;
        current = c;
        if converged {
            break;
        }
    }
    pose
}

/// Camera pose from 2D-3D correspondences: six-point DLT inside RANSAC
/// (inliers reproject within `epsilon_px`), then Gauss-Newton on the
/// inliers.
pub fn register_pose(
    points: &[Point3],
    pixels: &[PixelPoint],
    k: &CameraIntrinsics,
    epsilon_px: f64,
    seed: u64,
) -> Result<Resection, SfmError> {
    assert_eq!(points.len(), pixels.len());
    let n = points.len();
    if n < SAMPLE_SIZE {
        return Err(SfmError::RegistrationFailed(format!("{n} usable tracks, need {SAMPLE_SIZE}")));
    }
    let normalized: Vec<Vector2<f64>> = pixels.iter().map(|p| k.pixel_to_normalized(*p)).collect();
    let mut rng = SplitMix64::new(seed);
    let mut best: Option<(CameraPose, usize)> = None;
    let mut budget = MAX_ITERS;
    let mut iterations = 0;
    let (mut sp, mut sn) = (Vec::with_capacity(SAMPLE_SIZE), Vec::with_capacity(SAMPLE_SIZE));
    while iterations < budget {
        iterations += 1;
        sp.clear();
        sn.clear();
        for i in rng.sample_distinct(n, SAMPLE_SIZE) {
            sp.push(points[i]);
            sn.push(normalized[i]);
        }
        let Some(pose) = dlt_resection(&sp, &sn) else {
            continue;
        };
        // Sample points must lie in front of the camera.
        if sp.iter().any(|x| pose.depth(x) <= MIN_DEPTH) {
            continue;
        }
        let count = inlier_mask(&pose, k, points, pixels, epsilon_px).iter().filter(|b| **b).count();
        if best.as_ref().map_or(true, |b| count > b.1) {
            best = Some((pose, count));
            let w = count as f64 / n as f64;
            let p_good = w.powi(SAMPLE_SIZE as i32);
            if p_good >= 1.0 {
                budget = iterations;
            } else {
                let need = ((1.0 - CONFIDENCE).ln() / (-p_good).ln_1p()).ceil();
                if need.is_finite() {
                    budget = budget.min((need as usize).max(1));
                }
            }
        }
    }
    let Some((mut pose, count)) = best else {
        return Err(SfmError::RegistrationFailed("no valid resection sample".into()));
    };
    if count < SAMPLE_SIZE {
        return Err(SfmError::RegistrationFailed(format!("{count} inliers, need {SAMPLE_SIZE}")));
    }
    let mut mask = inlier_mask(&pose, k, points, pixels, epsilon_px);
    for _ in 0..3 {
        let (ip, ipx): (Vec<Point3>, Vec<PixelPoint>) =
            (0..n).filter(|&i| mask[i]).map(|i| (points[i], pixels[i])).unzip();
        let in_norm: Vec<Vector2<f64>> = ipx.iter().map(|p| k.pixel_to_normalized(*p)).collect();
        let start = dlt_resection(&ip, &in_norm)
            .filter(|p| ip.iter().all(|x| p.depth(x) > MIN_DEPTH))
            .map(|p| if refit_cost(&p, k, &ip, &ipx) < refit_cost(&pose, k, &ip, &ipx) { p } else { pose })
            .unwrap_or(pose);
        pose = refine_pose(&start, k, &ip, &ipx);
        let next = inlier_mask(&pose, k, points, pixels, epsilon_px);
        if next == mask {
            break;
        }
        mask = next;
    }
    let count = mask.iter().filter(|b| **b).count();
    if count < SAMPLE_SIZE {
        return Err(SfmError::RegistrationFailed(format!("{count} inliers after refinement")));
    }
    Ok(Resection {
        pose,
        inliers: mask,
        iterations,
    })
}

fn refit_cost(pose: &CameraPose, k: &CameraIntrinsics, pts: &[Point3], pix: &[PixelPoint]) -> f64 {
    pts.iter()
        .zip(pix)
        .map(|(x, p)| reprojection_error(pose, k, x, p).map_or(f64::INFINITY, |e| e * e))
        .sum()
}
