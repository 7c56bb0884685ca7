use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{FeatureError, Keypoint, Match};
use crate::geometry::PixelPoint;
use crate::rng::SplitMix64;

const SAMPLE_SIZE: usize = 8;
const CONFIDENCE: f64 = 0.99;

/// Rank-2 fundamental matrix with unit Frobenius norm, mapping points of
/// image A to epipolar lines in image B: `x_bᵀ F x_a = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Ratio of the smallest to the largest singular value.
    pub fn rank_deficiency(&self) -> f64 {
        let sv = self.0.singular_values();
        sv.min() / sv.max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Sampson distance threshold, pixels.
    pub epsilon_px: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            epsilon_px: 1.0,
            max_iters: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub fundamental: FundamentalMatrix,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Robust fundamental matrix from keypoint matches.
pub fn ransac_fundamental(
    matches: &[Match],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    params: &RansacParams,
) -> Result<RansacResult, FeatureError> {
    let pa: Vec<PixelPoint> = matches.iter().map(|m| kps_a[m.index_a].position()).collect();
    let pb: Vec<PixelPoint> = matches.iter().map(|m| kps_b[m.index_b].position()).collect();
    ransac_fundamental_points(&pa, &pb, params)
}

/// RANSAC over normalized eight-point minimal samples.
///
/// The iteration budget shrinks adaptively so that, at the current best
/// inlier ratio, an all-inlier sample has been drawn with 99% probability.
/// The returned matrix is refit on all inliers and the mask always refers to
/// the returned matrix.
pub fn ransac_fundamental_points(
    pa: &[PixelPoint],
    pb: &[PixelPoint],
    params: &RansacParams,
) -> Result<RansacResult, FeatureError> {
    assert_eq!(pa.len(), pb.len());
    let n = pa.len();
    if n < SAMPLE_SIZE {
        return Err(FeatureError::InsufficientMatches(n));
    }
    let mut rng = SplitMix64::new(params.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut budget = params.max_iters.max(1);
    let mut iterations = 0;
    let mut sample_a = [PixelPoint::origin(); SAMPLE_SIZE];
    let mut sample_b = [PixelPoint::origin(); SAMPLE_SIZE];

    while iterations < budget {
        iterations += 1;
        let idx = rng.sample_distinct(n, SAMPLE_SIZE);
        for (k, &i) in idx.iter().enumerate() {
            sample_a[k] = pa[i];
            sample_b[k] = pb[i];
        }
        let Some(f) = eight_point(&sample_a, &sample_b) else {
            continue;
        };
        let (mask, count) = inlier_mask(&f, pa, pb, params.epsilon_px);
        if best.as_ref().map_or(true, |b| count > b.2) {
            best = Some((f, mask, count));
            budget = budget.min(adaptive_budget(count, n, params.max_iters));
        }
    }

    let (mut f, mut mask, mut count) = best.ok_or(FeatureError::NoConsensus(0))?;
    // Refit on the consensus set while that does not lose inliers.
    for _ in 0..3 {
        let (ia, ib): (Vec<PixelPoint>, Vec<PixelPoint>) = (0..n)
            .filter(|&i| mask[i])
            .map(|i| (pa[i], pb[i]))
            .unzip();
        let Some(refit) = eight_point(&ia, &ib) else {
            break;
        };
        let (m2, c2) = inlier_mask(&refit, pa, pb, params.epsilon_px);
        if c2 < count {
            break;
        }
        let unchanged = m2 == mask;
        f = refit;
        mask = m2;
        count = c2;
        if unchanged {
            break;
        }
    }
    if count < SAMPLE_SIZE {
        return Err(FeatureError::NoConsensus(count));
    }
    Ok(RansacResult {
        fundamental: FundamentalMatrix(f),
        inliers: mask,
        iterations,
    })
}

fn adaptive_budget(inliers: usize, n: usize, cap: usize) -> usize {
    let w = inliers as f64 / n as f64;
    let p_good = w.powi(SAMPLE_SIZE as i32);
    if p_good >= 1.0 - f64::EPSILON {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let needed = ((1.0 - CONFIDENCE).ln() / (-p_good).ln_1p()).ceil();
    if needed.is_finite() {
        (needed as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn inlier_mask(f: &Matrix3<f64>, pa: &[PixelPoint], pb: &[PixelPoint], eps: f64) -> (Vec<bool>, usize) {
    let mut count = 0;
    let mask = pa
        .iter()
        .zip(pb)
        .map(|(a, b)| {
            let inlier = sampson_distance(f, a, b) < eps;
            count += inlier as usize;
            inlier
        })
        .collect();
    (mask, count)
}

/// First-order geometric (Sampson) distance of a correspondence, in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, a: &PixelPoint, b: &PixelPoint) -> f64 {
    let xa = Vector3::new(a.x, a.y, 1.0);
    let xb = Vector3::new(b.x, b.y, 1.0);
    let fxa = f * xa;
    let ftxb = f.transpose() * xb;
    let e = xb.dot(&fxa);
    let denom = fxa.x * fxa.x + fxa.y * fxa.y + ftxb.x * ftxb.x + ftxb.y * ftxb.y;
    if denom <= 0.0 {
        return if e == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (e * e / denom).sqrt()
}

/// Hartley-normalized eight-point estimate with rank-2 enforcement.
/// Accepts any number of points >= 8 (least squares). Returns `None` for
/// degenerate input.
pub fn eight_point(pa: &[PixelPoint], pb: &[PixelPoint]) -> Option<Matrix3<f64>> {
    let n = pa.len();
    if n < SAMPLE_SIZE || pb.len() != n {
        return None;
    }
    let ta = normalizing_transform(pa)?;
    let tb = normalizing_transform(pb)?;
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let p = ta * Vector3::new(pa[i].x, pa[i].y, 1.0);
        let q = tb * Vector3::new(pb[i].x, pb[i].y, 1.0);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (c, v) in row.iter().enumerate() {
            a[(i, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let f_vec = vt.row(min_idx);
    let f_hat = Matrix3::from_row_slice(f_vec.transpose().as_slice());

    let svd = f_hat.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    // nalgebra returns singular values sorted in decreasing order.
    s[2] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&s) * vt;
    let f = tb.transpose() * f_rank2 * ta;
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(f / norm)
}

fn normalizing_transform(pts: &[PixelPoint]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, project, CameraIntrinsics, CameraPose, Point3};

    /// Two cameras viewing a random 3D point set; returns exact projections
    /// and the ground-truth fundamental matrix.
    fn planted_geometry(seed: u64, n: usize) -> (Vec<PixelPoint>, Vec<PixelPoint>, Matrix3<f64>) {
        let mut rng = SplitMix64::new(seed);
        let k = CameraIntrinsics::pinhole(500.0, 320.0, 240.0);
        let pose_a = CameraPose::identity();
        let r = exp_so3(&Vector3::new(0.02, -0.15, 0.03));
        let pose_b = CameraPose::new(r, Vector3::new(-0.8, 0.1, 0.05));
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        while pa.len() < n {
            let x = Point3::new(rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 1.5), rng.uniform(4.0, 8.0));
            let (Ok(a), Ok(b)) = (project(&x, &pose_a, &k), project(&x, &pose_b, &k)) else {
                continue;
            };
            pa.push(a);
            pb.push(b);
        }
        let kinv = k.matrix().try_inverse().unwrap();
        let e = crate::geometry::skew(&pose_b.translation) * pose_b.rotation;
        let f = kinv.transpose() * e * kinv;
        (pa, pb, f / f.norm())
    }

    #[test]
    fn exact_matches_are_all_inliers() {
        let (pa, pb, f_true) = planted_geometry(1, 100);
        let res = ransac_fundamental_points(&pa, &pb, &RansacParams::default()).unwrap();
        assert_eq!(res.inlier_count(), 100);
        let f = res.fundamental.0;
        let aligned = (f - f_true).norm().min((f + f_true).norm());
        assert!(aligned < 1e-6, "{aligned}");
        assert!(res.fundamental.rank_deficiency() < 1e-6);
        assert!((f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_outliers_are_rejected() {
        let (mut pa, mut pb, _) = planted_geometry(2, 80);
        let mut rng = SplitMix64::new(77);
        let mut truth = vec![true; 80];
        for _ in 0..20 {
            pa.push(PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0)));
            pb.push(PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0)));
            truth.push(false);
        }
        let params = RansacParams {
            epsilon_px: 1.0,
            max_iters: 2000,
            seed: 9,
        };
        let res = ransac_fundamental_points(&pa, &pb, &params).unwrap();
        let true_in = res.inliers.iter().zip(&truth).filter(|(m, t)| **m && **t).count();
        let false_in = res.inliers.iter().zip(&truth).filter(|(m, t)| **m && !**t).count();
        assert!(true_in >= 78, "{true_in}");
        assert!(false_in <= 2, "{false_in}");
        for (i, &m) in res.inliers.iter().enumerate() {
            if m {
                assert!(sampson_distance(&res.fundamental.0, &pa[i], &pb[i]) < 1.0);
            }
        }
    }

    #[test]
    fn seven_matches_are_insufficient() {
        let (pa, pb, _) = planted_geometry(3, 7);
        assert_eq!(
            ransac_fundamental_points(&pa, &pb, &RansacParams::default()),
            Err(FeatureError::InsufficientMatches(7))
        );
    }

    #[test]
    fn pure_noise_has_no_consensus_or_few_inliers() {
        let mut rng = SplitMix64::new(4);
        let pa: Vec<_> = (0..60).map(|_| PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0))).collect();
        let pb: Vec<_> = (0..60).map(|_| PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0))).collect();
        match ransac_fundamental_points(&pa, &pb, &RansacParams::default()) {
            Err(FeatureError::NoConsensus(n)) => assert!(n < 8),
            Ok(res) => assert!(res.inlier_count() < 20, "{} inliers", res.inlier_count()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (mut pa, mut pb, _) = planted_geometry(5, 60);
        let mut rng = SplitMix64::new(6);
        for _ in 0..30 {
            pa.push(PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0)));
            pb.push(PixelPoint::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 480.0)));
        }
        let p = RansacParams { seed: 42, ..Default::default() };
        assert_eq!(
            ransac_fundamental_points(&pa, &pb, &p).unwrap(),
            ransac_fundamental_points(&pa, &pb, &p).unwrap()
        );
    }

    #[test]
    fn identical_views_fit_skew_fundamental() {
        let (pa, _, _) = planted_geometry(7, 50);
        let res = ransac_fundamental_points(&pa, &pa, &RansacParams::default()).unwrap();
        assert_eq!(res.inlier_count(), 50);
    }
}
