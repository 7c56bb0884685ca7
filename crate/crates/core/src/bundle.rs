//! Levenberg-Marquardt bundle adjustment.
//!
//! Parameters are camera poses (left-multiplied angle-axis rotation update
//! plus translation), 3D points and optionally one shared focal length. The
//! point blocks are eliminated with the Schur complement and the reduced
//! camera system is solved by dense Cholesky.
//!
//! Gauge: camera 0 is held fixed, and when `fix_scale` is set camera 1 keeps
//! the norm of its translation (its translation moves on a sphere, two
//! degrees of freedom). Together that removes the 7 similarity degrees of
//! freedom of a monocular reconstruction.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x2, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_so3, skew, CameraIntrinsics, CameraPose, PixelPoint, Point3};

/// Residual norm (pixels) reported for a point at or behind a camera.
pub const CLAMPED_RESIDUAL_PX: f64 = 1e4;
/// Camera-frame depth at or below which an observation is clamped.
pub const MIN_BA_DEPTH: f64 = 1e-6;
/// Damping above which a non positive definite reduced system is an error.
pub const MAX_PD_LAMBDA: f64 = 1e6;
/// Floor for diagonal entries of the damping matrix, so parameters without
/// any observation stay well posed.
const MIN_DIAG: f64 = 1e-9;
const MAX_LAMBDA: f64 = 1e16;

type Mat2x6 = SMatrix<f64, 2, 6>;
type Mat6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("invalid bundle problem: {0}")]
    InvalidProblem(String),
    #[error("invalid bundle parameters: {0}")]
    InvalidParams(String),
    #[error("reduced normal equations not positive definite at lambda {0:e}")]
    SingularNormalEquations(f64),
}

impl BundleError {
    pub fn code(&self) -> &'static str {
        match self {
            BundleError::InvalidProblem(_) => "invalid_problem",
            BundleError::InvalidParams(_) => "invalid_params",
            BundleError::SingularNormalEquations(_) => "singular_normal_equations",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BAObservation {
    pub camera: usize,
    pub point: usize,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAProblem {
    pub cameras: Vec<CameraPose>,
    pub points: Vec<Point3>,
    pub intrinsics: CameraIntrinsics,
    pub observations: Vec<BAObservation>,
    pub refine_focal: bool,
    /// Hold the translation norm of camera 1 (the scale gauge).
    pub fix_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BAParams {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub gradient_tolerance: f64,
    pub relative_cost_tolerance: f64,
    /// Huber threshold in pixels; `None` disables the robust kernel.
    pub huber_px: Option<f64>,
}

impl Default for BAParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            gradient_tolerance: 1e-10,
            relative_cost_tolerance: 1e-8,
            huber_px: Some(2.0),
        }
    }
}

impl BAParams {
    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: &str| Err(BundleError::InvalidParams(m.into()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.initial_lambda > 0.0 && self.initial_lambda.is_finite()) {
            return bad("initial lambda must be positive");
        }
        if !(self.lambda_up > 1.0) || !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return bad("lambda factors must satisfy up > 1 > down > 0");
        }
        if !(self.gradient_tolerance > 0.0) || !(self.relative_cost_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if let Some(h) = self.huber_px {
            if !(h > 0.0 && h.is_finite()) {
                return bad("huber threshold must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    RelativeCostChange,
    /// Damping grew past any useful value without finding a better step.
    DampingOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BAIteration {
    pub iteration: usize,
    pub lambda: f64,
    /// Cost of the trial step (accepted or not).
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BAReport {
    /// Halved sum of squared (robustified) residuals, px².
    pub initial_cost: f64,
    pub final_cost: f64,
    /// RMS over residual components of the raw reprojection error, px.
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub iterations: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub termination: Termination,
    pub trace: Vec<BAIteration>,
}

impl BAReport {
    /// One line per iteration: `iteration lambda cost accepted`.
    pub fn trace_text(&self) -> String {
        self.trace
            .iter()
            .map(|t| format!("{} {:e} {:e} {}\n", t.iteration, t.lambda, t.cost, u8::from(t.accepted)))
            .collect()
    }
}

/// Where each parameter block lives in the stacked parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    cam_offset: Vec<usize>,
    cam_dof: Vec<usize>,
    focal: Option<usize>,
    /// Camera and focal parameters; points follow.
    n_cam: usize,
    n: usize,
    /// Tangent basis of the scale camera's translation sphere.
    basis: Option<Matrix3x2<f64>>,
}

impl Layout {
    fn point_offset(&self, j: usize) -> usize {
        self.n_cam + 3 * j
    }
}

#[derive(Debug, Clone, Copy)]
struct ObsJacobian {
    residual: Vector2<f64>,
    jc: Mat2x6,
    jf: Vector2<f64>,
    jp: Matrix2x3<f64>,
    clamped: bool,
}

fn huber_weight(e: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if e > d => (d * (2.0 * e - d)).sqrt() / e,
        _ => 1.0,
    }
}

fn tangent_basis(t: &Vector3<f64>) -> Matrix3x2<f64> {
    let u = t.normalize();
    let a = if u.x.abs() < 0.6 { Vector3::x() } else { Vector3::y() };
    let b1 = (a - u * u.dot(&a)).normalize();
    let b2 = u.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

impl BAProblem {
    pub fn new(
        cameras: Vec<CameraPose>,
        points: Vec<Point3>,
        intrinsics: CameraIntrinsics,
        observations: Vec<BAObservation>,
    ) -> Self {
        Self {
            cameras,
            points,
            intrinsics,
            observations,
            refine_focal: false,
            fix_scale: true,
        }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: String| Err(BundleError::InvalidProblem(m));
        if self.cameras.is_empty() {
            return bad("no cameras".into());
        }
        if self.intrinsics.validate().is_err() {
            return bad("invalid intrinsics".into());
        }
        for (k, o) in self.observations.iter().enumerate() {
            if o.camera >= self.cameras.len() || o.point >= self.points.len() {
                return bad(format!("observation {k} references a missing block"));
            }
            if !(o.pixel.x.is_finite() && o.pixel.y.is_finite()) {
                return bad(format!("observation {k} is not finite"));
            }
        }
        if self.fix_scale && self.cameras.len() >= 2 && !(self.cameras[1].translation.norm() > 0.0) {
            return bad("scale camera has zero translation".into());
        }
        if self.layout().n == 0 {
            return bad("no free parameter block".into());
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut cam_offset = Vec::with_capacity(self.cameras.len());
        let mut cam_dof = Vec::with_capacity(self.cameras.len());
        let mut next = 0;
        let mut basis = None;
        for i in 0..self.cameras.len() {
            let dof = match i {
                0 => 0,
                1 if self.fix_scale => {
                    basis = Some(tangent_basis(&self.cameras[1].translation));
                    5
                }
                _ => 6,
            };
            cam_offset.push(next);
            cam_dof.push(dof);
            next += dof;
        }
        let focal = self.refine_focal.then(|| {
            next += 1;
            next - 1
        });
        Layout {
            cam_offset,
            cam_dof,
            focal,
            n_cam: next,
            n: next + 3 * self.points.len(),
            basis,
        }
    }

    /// Number of free scalar parameters after gauge fixing.
    pub fn parameter_count(&self) -> usize {
        self.layout().n
    }

    fn linearize(&self, layout: &Layout, o: &BAObservation, huber: Option<f64>) -> ObsJacobian {
        let pose = &self.cameras[o.camera];
        let x = &self.points[o.point];
        let pc = pose.transform(x);
        let projected = if pc.z > MIN_BA_DEPTH {
            self.intrinsics.project_camera_point(&pc).ok()
        } else {
            None
        };
        let Some((pred, jproj)) = projected else {
            let r = Vector2::repeat(CLAMPED_RESIDUAL_PX / 2f64.sqrt());
            return ObsJacobian {
                residual: r * huber_weight(CLAMPED_RESIDUAL_PX, huber),
                jc: Mat2x6::zeros(),
                jf: Vector2::zeros(),
                jp: Matrix2x3::zeros(),
                clamped: true,
            };
        };
        let r = pred - o.pixel;
        let w = huber_weight(r.norm(), huber);
        let mut jc = Mat2x6::zeros();
        match layout.cam_dof[o.camera] {
            0 => {}
            dof => {
                let jr = jproj * -skew(&(pose.rotation * x.coords));
                jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&jr);
                if dof == 5 {
                    let b = layout.basis.expect("scale camera basis");
                    jc.fixed_view_mut::<2, 2>(0, 3).copy_from(&(jproj * b));
                } else {
                    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&jproj);
                }
            }
        }
        let jf = if layout.focal.is_some() {
            self.intrinsics.focal_derivative(&pc)
        } else {
            Vector2::zeros()
        };
        ObsJacobian {
            residual: r * w,
            jc: jc * w,
            jf: jf * w,
            jp: jproj * pose.rotation * w,
            clamped: false,
        }
    }

    fn linearize_all(&self, layout: &Layout, huber: Option<f64>) -> Vec<ObsJacobian> {
        self.observations
            .par_iter()
            .map(|o| self.linearize(layout, o, huber))
            .collect()
    }

    /// Stacked residuals: entries `2k, 2k+1` are predicted minus observed
    /// pixel coordinates of observation `k`, scaled by the Huber weight when
    /// `huber` is set. Points at or behind a camera give a residual of norm
    /// [`CLAMPED_RESIDUAL_PX`].
    pub fn residuals(&self, huber: Option<f64>) -> Vec<f64> {
        let layout = self.layout();
        self.observations
            .par_iter()
            .flat_map_iter(|o| {
                let r = self.residual_only(&layout, o, huber);
                [r.x, r.y]
            })
            .collect()
    }

    fn residual_only(&self, _layout: &Layout, o: &BAObservation, huber: Option<f64>) -> Vector2<f64> {
        let pc = self.cameras[o.camera].transform(&self.points[o.point]);
        let projected = if pc.z > MIN_BA_DEPTH {
            self.intrinsics.project_camera_point(&pc).ok()
        } else {
            None
        };
        match projected {
            Some((pred, _)) => {
                let r = pred - o.pixel;
                r * huber_weight(r.norm(), huber)
            }
            None => {
                Vector2::repeat(CLAMPED_RESIDUAL_PX / 2f64.sqrt()) * huber_weight(CLAMPED_RESIDUAL_PX, huber)
            }
        }
    }

    /// Halved sum of squared residuals.
    pub fn cost(&self, huber: Option<f64>) -> f64 {
        0.5 * self.residuals(huber).iter().map(|r| r * r).sum::<f64>()
    }

    /// Raw reprojection error (pixels) per observation; `None` when clamped.
    pub fn reprojection_errors(&self) -> Vec<Option<f64>> {
        self.observations
            .iter()
            .map(|o| {
                let pc = self.cameras[o.camera].transform(&self.points[o.point]);
                if pc.z <= MIN_BA_DEPTH {
                    return None;
                }
                self.intrinsics
                    .project_camera_point(&pc)
                    .ok()
                    .map(|(p, _)| (p - o.pixel).norm())
            })
            .collect()
    }

    /// RMS over residual components of the raw reprojection error,
    /// ignoring clamped observations.
    pub fn rms_px(&self) -> f64 {
        let errs: Vec<f64> = self.reprojection_errors().into_iter().flatten().collect();
        if errs.is_empty() {
            return 0.0;
        }
        (errs.iter().map(|e| e * e).sum::<f64>() / (2 * errs.len()) as f64).sqrt()
    }

    fn apply_update(&mut self, layout: &Layout, delta: &DVector<f64>) {
        for (i, cam) in self.cameras.iter_mut().enumerate() {
            let (o, dof) = (layout.cam_offset[i], layout.cam_dof[i]);
            if dof == 0 {
                continue;
            }
            let w = Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
            cam.rotation = exp_so3(&w) * cam.rotation;
            if dof == 5 {
                let b = layout.basis.expect("scale camera basis");
                let norm = cam.translation.norm();
                let moved = cam.translation + b * Vector2::new(delta[o + 3], delta[o + 4]);
                cam.translation = moved.normalize() * norm;
            } else {
                cam.translation += Vector3::new(delta[o + 3], delta[o + 4], delta[o + 5]);
            }
        }
        if let Some(f) = layout.focal {
            self.intrinsics = self.intrinsics.with_focal(self.intrinsics.fx + delta[f]);
        }
        for (j, p) in self.points.iter_mut().enumerate() {
            let o = layout.point_offset(j);
            p.coords += Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
        }
    }
}

/// Normal equations `JᵀJ`, `Jᵀr` split into camera, point and coupling
/// blocks.
struct Normal {
    u: DMatrix<f64>,
    gc: DVector<f64>,
    v: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// Per point: (camera-system offset, coupling block). Rows past the
    /// block's parameter count are zero.
    w: Vec<Vec<(usize, Mat6x3)>>,
}

impl Normal {
    fn build(problem: &BAProblem, layout: &Layout, jacs: &[ObsJacobian]) -> Normal {
        let nc = layout.n_cam;
        let np = problem.points.len();
        let mut u = DMatrix::zeros(nc, nc);
        let mut gc = DVector::zeros(nc);
        let mut v = vec![Matrix3::zeros(); np];
        let mut gp = vec![Vector3::zeros(); np];
        let mut w: Vec<Vec<(usize, Mat6x3)>> = vec![Vec::new(); np];
        let add_w = |list: &mut Vec<(usize, Mat6x3)>, offset: usize, block: Mat6x3| {
            match list.iter_mut().find(|(o, _)| *o == offset) {
                Some((_, b)) => *b += block,
                None => list.push((offset, block)),
            }
        };
        for (o, j) in problem.observations.iter().zip(jacs) {
            if j.clamped {
                continue;
            }
            let (oc, dof) = (layout.cam_offset[o.camera], layout.cam_dof[o.camera]);
            if dof > 0 {
                let jtj = j.jc.transpose() * j.jc;
                let mut view = u.view_mut((oc, oc), (dof, dof));
                view += jtj.view((0, 0), (dof, dof));
                let g = j.jc.transpose() * j.residual;
                let mut gview = gc.rows_mut(oc, dof);
                gview += g.rows(0, dof);
                add_w(&mut w[o.point], oc, j.jc.transpose() * j.jp);
            }
            if let Some(of) = layout.focal {
                u[(of, of)] += j.jf.dot(&j.jf);
                gc[of] += j.jf.dot(&j.residual);
                if dof > 0 {
                    let cross = j.jc.transpose() * j.jf;
                    for k in 0..dof {
                        u[(oc + k, of)] += cross[k];
                        u[(of, oc + k)] += cross[k];
                    }
                }
                let mut fb = Mat6x3::zeros();
                fb.set_row(0, &(j.jf.transpose() * j.jp));
                add_w(&mut w[o.point], of, fb);
            }
            v[o.point] += j.jp.transpose() * j.jp;
            gp[o.point] += j.jp.transpose() * j.residual;
        }
        Normal { u, gc, v, gp, w }
    }

    fn gradient_norm(&self) -> f64 {
        let c = self.gc.amax();
        self.gp.iter().map(|g| g.amax()).fold(c, f64::max)
    }

    fn block_len(layout: &Layout, offset: usize) -> usize {
        if Some(offset) == layout.focal {
            return 1;
        }
        let i = layout
            .cam_offset
            .iter()
            .zip(&layout.cam_dof)
            .position(|(&o, &d)| o == offset && d > 0)
            .expect("coupling block offset");
        layout.cam_dof[i]
    }

    /// Damped step by point elimination. `None` when the damped system is
    /// not positive definite.
    fn schur_step(&self, layout: &Layout, lambda: f64) -> Option<DVector<f64>> {
        let nc = layout.n_cam;
        let mut s = self.u.clone();
        for i in 0..nc {
            s[(i, i)] += lambda * self.u[(i, i)].max(MIN_DIAG);
        }
        let mut rhs = -self.gc.clone();
        let vinv: Vec<Option<Matrix3<f64>>> = self
            .v
            .par_iter()
            .map(|v| {
                let mut d = *v;
                for k in 0..3 {
                    d[(k, k)] += lambda * v[(k, k)].max(MIN_DIAG);
                }
                d.cholesky().map(|c| c.inverse())
            })
            .collect();
        let vinv: Vec<Matrix3<f64>> = vinv.into_iter().collect::<Option<_>>()?;
        let lens: Vec<Vec<usize>> = self
            .w
            .iter()
            .map(|blocks| blocks.iter().map(|(o, _)| Self::block_len(layout, *o)).collect())
            .collect();
        for (j, blocks) in self.w.iter().enumerate() {
            for (a, (oa, wa)) in blocks.iter().enumerate() {
                let la = lens[j][a];
                let wv = wa * vinv[j];
                let mut r = rhs.rows_mut(*oa, la);
                r += (wv * self.gp[j]).rows(0, la);
                for (b, (ob, wb)) in blocks.iter().enumerate() {
                    let lb = lens[j][b];
                    let prod = wv * wb.transpose();
                    let mut view = s.view_mut((*oa, *ob), (la, lb));
                    view -= prod.view((0, 0), (la, lb));
                }
            }
        }
        let dc = if nc > 0 {
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut delta = DVector::zeros(layout.n);
        delta.rows_mut(0, nc).copy_from(&dc);
        for (j, blocks) in self.w.iter().enumerate() {
            let mut rhs_p = -self.gp[j];
            for (b, (ob, wb)) in blocks.iter().enumerate() {
                let lb = lens[j][b];
                let mut seg = SVector::<f64, 6>::zeros();
                seg.rows_mut(0, lb).copy_from(&dc.rows(*ob, lb));
                rhs_p -= wb.transpose() * seg;
            }
            let dp = vinv[j] * rhs_p;
            delta.fixed_rows_mut::<3>(layout.point_offset(j)).copy_from(&dp);
        }
        delta.iter().all(|x| x.is_finite()).then_some(delta)
    }

    /// Reduced camera matrix at zero damping.
    fn reduced_matrix(&self, layout: &Layout) -> Option<DMatrix<f64>> {
        let mut s = self.u.clone();
        for (j, blocks) in self.w.iter().enumerate() {
            let vinv = self.v[j].cholesky()?.inverse();
            for (oa, wa) in blocks {
                let la = Self::block_len(layout, *oa);
                for (ob, wb) in blocks {
                    let lb = Self::block_len(layout, *ob);
                    let prod = wa * vinv * wb.transpose();
                    let mut view = s.view_mut((*oa, *ob), (la, lb));
                    view -= prod.view((0, 0), (la, lb));
                }
            }
        }
        Some(s)
    }
}

fn dense_jacobian(problem: &BAProblem, layout: &Layout, jacs: &[ObsJacobian]) -> (DMatrix<f64>, DVector<f64>) {
    let m = 2 * problem.observations.len();
    let mut j = DMatrix::zeros(m, layout.n);
    let mut r = DVector::zeros(m);
    for (k, (o, jac)) in problem.observations.iter().zip(jacs).enumerate() {
        r[2 * k] = jac.residual.x;
        r[2 * k + 1] = jac.residual.y;
        if jac.clamped {
            continue;
        }
        let (oc, dof) = (layout.cam_offset[o.camera], layout.cam_dof[o.camera]);
        j.view_mut((2 * k, oc), (2, dof)).copy_from(&jac.jc.view((0, 0), (2, dof)));
        if let Some(of) = layout.focal {
            j.view_mut((2 * k, of), (2, 1)).copy_from(&jac.jf);
        }
        j.view_mut((2 * k, layout.point_offset(o.point)), (2, 3)).copy_from(&jac.jp);
    }
    (j, r)
}

/// Damped Gauss-Newton step from the Schur complement solver, stacked as
/// cameras (fixed blocks omitted), focal, then points.
pub fn schur_step(problem: &BAProblem, lambda: f64, huber: Option<f64>) -> Option<DVector<f64>> {
    let layout = problem.layout();
    let jacs = problem.linearize_all(&layout, huber);
    Normal::build(problem, &layout, &jacs).schur_step(&layout, lambda)
}

/// The same step from the full dense system; a test oracle for small problems.
pub fn dense_step(problem: &BAProblem, lambda: f64, huber: Option<f64>) -> Option<DVector<f64>> {
    let layout = problem.layout();
    let jacs = problem.linearize_all(&layout, huber);
    let (j, r) = dense_jacobian(problem, &layout, &jacs);
    let mut a = j.transpose() * &j;
    for i in 0..layout.n {
        a[(i, i)] += lambda * a[(i, i)].max(MIN_DIAG);
    }
    let g = j.transpose() * r;
    a.cholesky().map(|c| c.solve(&-g))
}

/// Reduced camera system (points eliminated) at zero damping.
pub fn reduced_camera_matrix(problem: &BAProblem) -> Option<DMatrix<f64>> {
    let layout = problem.layout();
    let jacs = problem.linearize_all(&layout, None);
    Normal::build(problem, &layout, &jacs).reduced_matrix(&layout)
}

/// Largest relative difference between the analytic Jacobian of the raw
/// residuals and central finite differences with step `h`. Entries are
/// compared relative to their own magnitude, floored at 1e-4 of the largest
/// Jacobian entry. Residuals clamped at any of the evaluations are skipped.
pub fn jacobian_check(problem: &BAProblem, h: f64) -> f64 {
    assert!((1e-8..=1e-4).contains(&h), "finite-difference step out of range");
    let layout = problem.layout();
    let jacs = problem.linearize_all(&layout, None);
    let (analytic, _) = dense_jacobian(problem, &layout, &jacs);
    let mut skip: Vec<bool> = jacs.iter().map(|j| j.clamped).collect();
    let columns: Vec<(DVector<f64>, Vec<bool>)> = (0..layout.n)
        .into_par_iter()
        .map(|k| {
            let eval = |sign: f64| {
                let mut p = problem.clone();
                let mut d = DVector::zeros(layout.n);
                d[k] = sign * h;
                p.apply_update(&layout, &d);
                let clamped: Vec<bool> = p
                    .observations
                    .iter()
                    .map(|o| p.cameras[o.camera].depth(&p.points[o.point]) <= MIN_BA_DEPTH)
                    .collect();
                (DVector::from_vec(p.residuals(None)), clamped)
            };
            let (plus, cp) = eval(1.0);
            let (minus, cm) = eval(-1.0);
            let clamped = cp.iter().zip(&cm).map(|(a, b)| *a || *b).collect();
            ((plus - minus) / (2.0 * h), clamped)
        })
        .collect();
    for (_, c) in &columns {
        for (s, &x) in skip.iter_mut().zip(c) {
            *s |= x;
        }
    }
    let floor = 1e-4 * analytic.amax();
    let mut worst: f64 = 0.0;
    for (k, (numeric, _)) in columns.iter().enumerate() {
        for (row, &skipped) in skip.iter().enumerate().flat_map(|(i, s)| [(2 * i, s), (2 * i + 1, s)]) {
            if skipped {
                continue;
            }
            let (a, n) = (analytic[(row, k)], numeric[row]);
            let scale = a.abs().max(n.abs()).max(floor);
            if scale > 0.0 {
                worst = worst.max((a - n).abs() / scale);
            }
        }
    }
    worst
}

/// Minimize the reprojection cost in place.
///
/// Each iteration solves one damped system and evaluates the step; the step
/// is accepted only if it lowers the cost. A non positive definite system
/// raises the damping without counting as an iteration.
pub fn solve_lm(problem: &mut BAProblem, params: &BAParams) -> Result<BAReport, BundleError> {
    params.validate()?;
    problem.validate()?;
    let huber = params.huber_px;
    let initial_cost = problem.cost(huber);
    let initial_rms_px = problem.rms_px();
    let mut cost = initial_cost;
    let mut lambda = params.initial_lambda;
    let mut layout = problem.layout();
    let mut normal = Normal::build(problem, &layout, &problem.linearize_all(&layout, huber));
    let mut trace = Vec::new();
    let (mut accepted, mut rejected) = (0, 0);
    let mut termination = Termination::MaxIterations;

    for iteration in 1..=params.max_iterations {
        let step = loop {
            if let Some(step) = normal.schur_step(&layout, lambda) {
                break step;
            }
            lambda *= params.lambda_up;
            if lambda > MAX_PD_LAMBDA {
                return Err(BundleError::SingularNormalEquations(lambda));
            }
        };
        let saved = (problem.cameras.clone(), problem.points.clone(), problem.intrinsics);
        problem.apply_update(&layout, &step);
        let new_cost = problem.cost(huber);
        let ok = new_cost < cost;
        trace.push(BAIteration {
            iteration,
            lambda,
            cost: new_cost,
            accepted: ok,
        });
        if ok {
            accepted += 1;
            let change = (cost - new_cost) / cost;
            cost = new_cost;
            lambda = (lambda * params.lambda_down).max(1e-15);
            if change <= params.relative_cost_tolerance {
                termination = Termination::RelativeCostChange;
                break;
            }
            layout = problem.layout();
            normal = Normal::build(problem, &layout, &problem.linearize_all(&layout, huber));
            if normal.gradient_norm() <= params.gradient_tolerance {
                termination = Termination::GradientTolerance;
                break;
            }
        } else {
            rejected += 1;
            (problem.cameras, problem.points, problem.intrinsics) = saved;
            if new_cost.is_finite() && new_cost - cost <= params.relative_cost_tolerance * cost {
                termination = Termination::RelativeCostChange;
                break;
            }
            lambda *= params.lambda_up;
            if lambda > MAX_LAMBDA {
                termination = Termination::DampingOverflow;
                break;
            }
        }
    }
    log::debug!(
        "bundle adjustment: cost {initial_cost:.4e} -> {cost:.4e} in {} iterations ({termination:?})",
        accepted + rejected
    );
    Ok(BAReport {
        initial_cost,
        final_cost: cost,
        initial_rms_px,
        final_rms_px: problem.rms_px(),
        iterations: accepted + rejected,
        accepted,
        rejected,
        termination,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::rng::SplitMix64;

    /// Cameras on an arc around the origin looking at a cube of points.
    fn problem(seed: u64, n_cams: usize, n_points: usize) -> BAProblem {
        let mut rng = SplitMix64::new(seed);
        let k = CameraIntrinsics::pinhole(500.0, 320.0, 240.0);
        let cameras: Vec<CameraPose> = (0..n_cams)
            .map(|i| {
                let a = (i as f64 * 8.0 + rng.uniform(-2.0, 2.0)).to_radians();
                let eye = Point3::new(5.0 * a.sin(), rng.uniform(-0.5, 0.5), -5.0 * a.cos());
                CameraPose::look_at(&eye, &Point3::origin(), &Vector3::y())
            })
            .collect();
        let points: Vec<Point3> = (0..n_points)
            .map(|_| Point3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)))
            .collect();
        let mut observations = Vec::new();
        for (c, pose) in cameras.iter().enumerate() {
            for (p, x) in points.iter().enumerate() {
                observations.push(BAObservation {
                    camera: c,
                    point: p,
                    pixel: project(x, pose, &k).unwrap(),
                });
            }
        }
        BAProblem::new(cameras, points, k, observations)
    }

    #[test]
    fn residuals_vanish_at_ground_truth() {
        let p = problem(1, 4, 20);
        assert!(p.residuals(Some(2.0)).iter().all(|r| r.abs() < 1e-9));
        assert_eq!(p.residuals(None).len(), 2 * p.observations.len());
    }

    #[test]
    fn displacement_along_optical_axis_is_invisible_to_that_camera() {
        let mut p = problem(2, 3, 1);
        // The cameras look at the origin, so a point there is on every axis.
        p.points[0] = Point3::origin();
        for o in &mut p.observations {
            o.pixel = project(&p.points[0], &p.cameras[o.camera], &p.intrinsics).unwrap();
        }
        let axis = p.cameras[0].rotation.row(2).transpose();
        p.points[0] += axis * 0.3;
        let r = p.residuals(None);
        assert!(r[0].abs() < 1e-9 && r[1].abs() < 1e-9);
        assert!(r[2].abs() + r[3].abs() > 1e-3);
        assert!(r[4].abs() + r[5].abs() > 1e-3);
    }

    #[test]
    fn displaced_observation_and_huber_weight() {
        let mut p = problem(3, 2, 1);
        p.observations[0].pixel.x += 3.0;
        p.observations[0].pixel.y += 4.0;
        let r = p.residuals(None);
        assert!((r[0] + 3.0).abs() < 1e-9 && (r[1] + 4.0).abs() < 1e-9);
        // Huber with threshold 2 at |r| = 5: rho = 2 * (5 - 1) = 8, so the
        // weighted residual has norm sqrt(2 * rho) = 4.
        let r = p.residuals(Some(2.0));
        assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gauge_removes_seven_degrees_of_freedom() {
        let mut p = problem(4, 5, 30);
        assert_eq!(p.parameter_count(), 6 * 5 + 3 * 30 - 7);
        p.refine_focal = true;
        assert_eq!(p.parameter_count(), 6 * 5 + 3 * 30 - 6);
        let s = reduced_camera_matrix(&p).unwrap();
        assert!(s.cholesky().is_some());
    }

    #[test]
    fn schur_matches_dense_solve() {
        for seed in 0..5 {
            let mut p = problem(10 + seed, 4, 25);
            p.refine_focal = seed % 2 == 0;
            let mut rng = SplitMix64::new(seed);
            for x in &mut p.points {
                x.coords += Vector3::new(rng.gaussian(), rng.gaussian(), rng.gaussian()) * 0.02;
            }
            let a = schur_step(&p, 1e-3, Some(2.0)).unwrap();
            let b = dense_step(&p, 1e-3, Some(2.0)).unwrap();
            assert!((&a - &b).norm() <= 1e-8 * b.norm(), "seed {seed}");
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut p = problem(5, 3, 10);
        p.refine_focal = true;
        assert!(jacobian_check(&p, 1e-6) < 1e-4);
    }

    #[test]
    fn near_zero_depth_is_clamped_and_skipped() {
        let mut p = problem(6, 3, 5);
        let c = p.cameras[2];
        p.points[4] = Point3::from(c.rotation.transpose() * (Vector3::new(0.0, 0.0, 1e-8) - c.translation));
        let r = p.residuals(None);
        let k = p.observations.iter().position(|o| o.camera == 2 && o.point == 4).unwrap();
        assert!((Vector2::new(r[2 * k], r[2 * k + 1]).norm() - CLAMPED_RESIDUAL_PX).abs() < 1e-6);
        assert!(jacobian_check(&p, 1e-6) < 1e-4);
    }

    #[test]
    fn ground_truth_start_stops_after_one_iteration() {
        let mut p = problem(7, 4, 20);
        let report = solve_lm(&mut p, &BAParams::default()).unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(report.termination, Termination::RelativeCostChange);
        assert!(report.final_cost < 1e-15);
    }

    #[test]
    fn bad_params_rejected() {
        let p = BAParams {
            lambda_up: 0.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let mut prob = problem(8, 2, 5);
        prob.observations[0].point = 99;
        assert!(matches!(
            solve_lm(&mut prob, &BAParams::default()),
            Err(BundleError::InvalidProblem(_))
        ));
    }
}
