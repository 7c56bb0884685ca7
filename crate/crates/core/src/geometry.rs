//! Camera model, rigid and similarity transforms, projection and two-view
//! triangulation.
//!
//! Conventions: a [`CameraPose`] maps world points into the camera frame,
//! `X_cam = R * X_world + t`. The camera looks down `+Z`, `u` grows to the
//! right and `v` grows downwards.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type PixelPoint = nalgebra::Point2<f64>;

/// Depth at or below which a point is considered to be behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("camera centers coincide; baseline is degenerate")]
    DegenerateBaseline,
    #[error("triangulated point lies behind camera {0}")]
    BehindCamera(usize),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::NonPositiveDepth(_) => "non_positive_depth",
            GeometryError::DegenerateBaseline => "degenerate_baseline",
            GeometryError::BehindCamera(_) => "behind_camera",
            GeometryError::InvalidIntrinsics(_) => "invalid_intrinsics",
        }
    }
}

/// Pinhole intrinsics with two-coefficient radial distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, k1: f64, k2: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, k1, k2 };
        k.validate()?;
        Ok(k)
    }

    /// Distortion-free camera with square pixels.
    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx: f,
            fy: f,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if ![self.cx, self.cy, self.k1, self.k2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point and distortion must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0
    }

    fn radial(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Normalized (undistorted) image coordinates to pixels.
    pub fn normalized_to_pixel(&self, n: Vector2<f64>) -> PixelPoint {
        let d = self.radial(n.norm_squared());
        PixelPoint::new(self.fx * d * n.x + self.cx, self.fy * d * n.y + self.cy)
    }

    /// Pixels to normalized coordinates, inverting the radial model with five
    /// fixed-point iterations (adequate for |k1| <= 0.2).
    pub fn pixel_to_normalized(&self, p: PixelPoint) -> Vector2<f64> {
        let distorted = Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy);
        if !self.has_distortion() {
            return distorted;
        }
        let mut n = distorted;
        for _ in 0..5 {
            n = distorted / self.radial(n.norm_squared());
        }
        n
    }

    /// Removes lens distortion while staying in pixel units.
    pub fn undistort_pixel(&self, p: PixelPoint) -> PixelPoint {
        let n = self.pixel_to_normalized(p);
        PixelPoint::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Unit-norm viewing ray through a pixel, in the camera frame.
    pub fn bearing(&self, p: PixelPoint) -> Vector3<f64> {
        let n = self.pixel_to_normalized(p);
        Vector3::new(n.x, n.y, 1.0).normalize()
    }

    /// Project a camera-frame point. Also returns the 2x3 Jacobian of the
    /// pixel coordinates with respect to the camera-frame point.
    pub fn project_camera_point(
        &self,
        pc: &Vector3<f64>,
    ) -> Result<(PixelPoint, Matrix2x3<f64>), GeometryError> {
        if pc.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(pc.z));
        }
        let iz = 1.0 / pc.z;
        let x = pc.x * iz;
        let y = pc.y * iz;
        let r2 = x * x + y * y;
        let d = self.radial(r2);
        let dd_dr2 = self.k1 + 2.0 * self.k2 * r2;
        let pixel = PixelPoint::new(self.fx * d * x + self.cx, self.fy * d * y + self.cy);

        // d(u,v)/d(x,y)
        let a = Matrix2::new(
            self.fx * (d + 2.0 * x * x * dd_dr2),
            self.fx * 2.0 * x * y * dd_dr2,
            self.fy * 2.0 * x * y * dd_dr2,
            self.fy * (d + 2.0 * y * y * dd_dr2),
        );
        // d(x,y)/d(X,Y,Z)
        let b = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        Ok((pixel, a * b))
    }

    /// Derivative of the pixel coordinates with respect to a shared focal
    /// parameter `f = fx` with `fy = f * fy/fx` held in ratio.
    pub fn focal_derivative(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        let x = pc.x / pc.z;
        let y = pc.y / pc.z;
        let d = self.radial(x * x + y * y);
        Vector2::new(d * x, d * y * (self.fy / self.fx))
    }

    /// Copy with `fx` replaced and `fy` scaled to keep the aspect ratio.
    pub fn with_focal(&self, fx: f64) -> Self {
        Self {
            fy: self.fy * fx / self.fx,
            fx,
            ..*self
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose of a camera at `center` with the given world-to-camera rotation.
    pub fn from_center(rotation: Matrix3<f64>, center: &Point3) -> Self {
        Self {
            rotation,
            translation: -(rotation * center.coords),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upwards in the image (towards -v).
    pub fn look_at(eye: &Point3, target: &Point3, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_center(rotation, eye)
    }

    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn transform(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn depth(&self, p: &Point3) -> f64 {
        self.rotation.row(2).dot(&p.coords.transpose()) + self.translation.z
    }

    /// Largest deviation of RᵀR from identity and of det R from one.
    pub fn orthonormality_error(&self) -> f64 {
        rotation_error(&self.rotation)
    }

    /// Relative pose taking camera `self` coordinates to camera `other`.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        let rotation = other.rotation * self.rotation.transpose();
        CameraPose {
            rotation,
            translation: other.translation - rotation * self.translation,
        }
    }

    /// Rotation as a unit quaternion `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_center(wxyz: [f64; 4], center: &Point3) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        ));
        Self::from_center(q.to_rotation_matrix().into_inner(), center)
    }
}

pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Angle-axis vector to rotation matrix.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// Rotation matrix to angle-axis vector.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Angle between two rotations, radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Forward projection of a world point into pixels (distortion applied).
pub fn project(
    point: &Point3,
    pose: &CameraPose,
    k: &CameraIntrinsics,
) -> Result<PixelPoint, GeometryError> {
    k.project_camera_point(&pose.transform(point)).map(|(p, _)| p)
}

/// Two-view triangulation: linear DLT on undistorted normalized rays followed
/// by one Gauss-Newton step on the pixel reprojection error of both views.
pub fn triangulate(
    obs_a: &PixelPoint,
    obs_b: &PixelPoint,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    k: &CameraIntrinsics,
) -> Result<Point3, GeometryError> {
    if (pose_a.center() - pose_b.center()).norm() <= 1e-9 {
        return Err(GeometryError::DegenerateBaseline);
    }
    let x = triangulate_linear(
        &k.pixel_to_normalized(*obs_a),
        &k.pixel_to_normalized(*obs_b),
        pose_a,
        pose_b,
    )?;
    let x = gauss_newton_step(&x, &[(*obs_a, pose_a), (*obs_b, pose_b)], k).unwrap_or(x);
    for (i, pose) in [pose_a, pose_b].into_iter().enumerate() {
        if pose.depth(&x) <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(i));
        }
    }
    Ok(x)
}

/// Linear DLT triangulation from normalized image coordinates.
pub fn triangulate_linear(
    na: &Vector2<f64>,
    nb: &Vector2<f64>,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
) -> Result<Point3, GeometryError> {
    let mut a = Matrix4::<f64>::zeros();
    for (row, (n, pose)) in [(na, pose_a), (nb, pose_b)].into_iter().enumerate() {
        let p = camera_matrix(pose);
        let r0 = p.row(0);
        let r1 = p.row(1);
        let r2 = p.row(2);
        // Each row is scaled to unit norm for conditioning.
        let e0 = r2 * n.x - r0;
        let e1 = r2 * n.y - r1;
        a.set_row(2 * row, &(e0 / e0.norm()));
        a.set_row(2 * row + 1, &(e1 / e1.norm()));
    }
    let svd = (a.transpose() * a).symmetric_eigen();
    let (min_idx, _) = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("4 eigenvalues");
    let h: Vector4<f64> = svd.eigenvectors.column(min_idx).into();
    if h.w.abs() < 1e-14 * h.xyz().norm() {
        // Parallel rays: point at infinity.
        return Err(GeometryError::BehindCamera(0));
    }
    Ok(Point3::from(h.xyz() / h.w))
}

fn camera_matrix(pose: &CameraPose) -> nalgebra::Matrix3x4<f64> {
    let mut p = nalgebra::Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    p.set_column(3, &pose.translation);
    p
}

fn gauss_newton_step(
    x: &Point3,
    views: &[(PixelPoint, &CameraPose)],
    k: &CameraIntrinsics,
) -> Option<Point3> {
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vector3::<f64>::zeros();
    for (obs, pose) in views {
        let (pred, jc) = k.project_camera_point(&pose.transform(x)).ok()?;
        let j = jc * pose.rotation;
        let r = pred - obs;
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    let step = jtj.cholesky()?.solve(&-jtr);
    Some(x + step)
}

/// Scale, rotation and translation: `p -> s * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0);
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn rigid(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(1.0, rotation, translation)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn invert(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimilarityTransform {
            scale: inv_s,
            rotation: rt,
            translation: -(inv_s * (rt * self.translation)),
        }
    }

    /// Homogeneous 4x4 matrix, `[sR t; 0 1]`.
    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse of [`to_matrix4`](Self::to_matrix4); the upper-left block
    /// must be a positive multiple of a rotation.
    pub fn from_matrix4(m: &Matrix4<f64>) -> Option<SimilarityTransform> {
        let block: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let scale = block.determinant().cbrt();
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let rotation = block / scale;
        if rotation_error(&rotation) > 1e-6 {
            return None;
        }
        Some(SimilarityTransform {
            scale,
            rotation,
            translation: m.fixed_view::<3, 1>(0, 3).into(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Least-squares similarity (or rigid) transform mapping `src` onto `dst`
/// (Umeyama 1991). `None` when either point set is collinear or coincident,
/// since the rotation is then not determined.
pub fn umeyama(src: &[Point3], dst: &[Point3], with_scale: bool) -> Option<SimilarityTransform> {
    assert_eq!(src.len(), dst.len(), "umeyama: length mismatch");
    let n = src.len();
    if n < 3 {
        return None;
    }
    let mean = |pts: &[Point3]| pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let (mu_s, mu_d) = (mean(src), mean(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut scatter_s = Matrix3::zeros();
    let mut scatter_d = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a.coords - mu_s, b.coords - mu_d);
        cov += db * da.transpose();
        var_s += da.norm_squared();
        scatter_s += da * da.transpose();
        scatter_d += db * db.transpose();
    }
    cov /= n as f64;
    var_s /= n as f64;
    for scatter in [scatter_s, scatter_d] {
        let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if !(ev[0] > 0.0) || ev[1] < 1e-12 * ev[0] {
            return None;
        }
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * vt.determinant() < 0.0 {
        d[svd.singular_values.imin()] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * vt;
    let scale = if with_scale {
        svd.singular_values.component_mul(&d).sum() / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return None;
    }
    let translation = mu_d - scale * (rotation * mu_s);
    Some(SimilarityTransform::new(scale, rotation, translation))
}
