use nalgebra::{Matrix3, Vector3};

use super::{SfmError, SfmParams};
use crate::features::{ransac_fundamental_points, RansacParams};
use crate::geometry::{triangulate, triangulate_linear, CameraIntrinsics, CameraPose, PixelPoint, Point3};

/// Below this median triangulation angle a pair is treated as a pure
/// rotation whatever the cheirality vote says.
const MIN_PARALLAX_DEG: f64 = 0.1;

/// Relative pose of a keyframe pair with camera A at the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoView {
    /// Camera B; its translation has unit norm.
    pub pose_b: CameraPose,
    /// RANSAC inliers of the fundamental matrix.
    pub inliers: Vec<bool>,
    /// Triangulated inliers in front of both cameras.
    pub points: Vec<Option<Point3>>,
    /// Positive-depth counts of the four `(R, t)` candidates, in the order
    /// of [`decompose_essential`].
    pub cheirality: [usize; 4],
    pub winner: usize,
    pub median_parallax_deg: f64,
}

impl TwoView {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// The four `(R, t)` factorizations of an essential matrix:
/// `(R1, t)`, `(R1, -t)`, `(R2, t)`, `(R2, -t)` with unit `t`.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("svd u");
    let mut vt = svd.v_t.expect("svd v_t");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Angle in degrees between the two viewing rays of a correspondence, with
/// camera A at the identity. Zero for any pure rotation.
pub fn parallax_deg(pose_b: &CameraPose, k: &CameraIntrinsics, pa: &PixelPoint, pb: &PixelPoint) -> f64 {
    let ra = k.bearing(*pa);
    let rb = pose_b.rotation.transpose() * k.bearing(*pb);
    ra.dot(&rb).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Relative pose from pixel correspondences between two keyframes.
///
/// A fundamental matrix is estimated by RANSAC, lifted to the essential
/// matrix `E = KᵀFK` and factored into four candidates. Each candidate
/// triangulates every inlier; the one with the most points in front of both
/// cameras wins.
pub fn init_two_view(
    pa: &[PixelPoint],
    pb: &[PixelPoint],
    k: &CameraIntrinsics,
    params: &SfmParams,
) -> Result<TwoView, SfmError> {
    assert_eq!(pa.len(), pb.len());
    let need = params.min_pair_inliers;
    if pa.len() < need {
        return Err(SfmError::InsufficientTracks(format!(
            "{} correspondences, need {need}",
            pa.len()
        )));
    }
    let ua: Vec<PixelPoint> = pa.iter().map(|p| k.undistort_pixel(*p)).collect();
    let ub: Vec<PixelPoint> = pb.iter().map(|p| k.undistort_pixel(*p)).collect();
    let ransac = RansacParams {
        epsilon_px: params.ransac_epsilon_px,
        seed: params.seed,
        ..Default::default()
    };
    let fit = ransac_fundamental_points(&ua, &ub, &ransac)
        .map_err(|e| SfmError::InsufficientTracks(format!("pair has no epipolar consensus: {e}")))?;
    let inlier_idx: Vec<usize> = (0..pa.len()).filter(|&i| fit.inliers[i]).collect();
    if inlier_idx.len() < need {
        return Err(SfmError::InsufficientTracks(format!(
            "{} RANSAC inliers, need {need}",
            inlier_idx.len()
        )));
    }

    let km = k.matrix();
    let e = km.transpose() * fit.fundamental.matrix() * km;
    let candidates = decompose_essential(&e);
    let na: Vec<_> = inlier_idx.iter().map(|&i| k.pixel_to_normalized(pa[i])).collect();
    let nb: Vec<_> = inlier_idx.iter().map(|&i| k.pixel_to_normalized(pb[i])).collect();
    let origin = CameraPose::identity();
    let mut cheirality = [0usize; 4];
    for (c, (r, t)) in candidates.iter().enumerate() {
        let pose = CameraPose::new(*r, *t);
        cheirality[c] = na
            .iter()
            .zip(&nb)
            .filter(|(a, b)| {
                triangulate_linear(a, b, &origin, &pose)
                    .map(|x| origin.depth(&x) > 0.0 && pose.depth(&x) > 0.0)
                    .unwrap_or(false)
            })
            .count();
    }
    let winner = (0..4).fold(0, |best, c| if cheirality[c] > cheirality[best] { c } else { best });
    let (r, t) = candidates[winner];
    let pose_b = CameraPose::new(r, t.normalize());

    let mut parallax: Vec<f64> = inlier_idx.iter().map(|&i| parallax_deg(&pose_b, k, &pa[i], &pb[i])).collect();
    parallax.sort_by(f64::total_cmp);
    let median_parallax_deg = parallax[parallax.len() / 2];
    let n_in = inlier_idx.len();
    if 2 * cheirality[winner] < n_in || median_parallax_deg < MIN_PARALLAX_DEG {
        return Err(SfmError::DegeneratePair(format!(
            "best candidate has {} of {n_in} points in front, median parallax {median_parallax_deg:.3} deg",
            cheirality[winner]
        )));
    }

    let points = (0..pa.len())
        .map(|i| {
            if !fit.inliers[i] {
                return None;
            }
            triangulate(&pa[i], &pb[i], &origin, &pose_b, k).ok()
        })
        .collect();
    Ok(TwoView {
        pose_b,
        inliers: fit.inliers,
        points,
        cheirality,
        winner,
        median_parallax_deg,
    })
}
