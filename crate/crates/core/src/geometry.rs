//! Calibrated multi-camera geometry: projection, epipolar constraints and
//! triangulation.
//!
//! Conventions, used everywhere in this crate:
//! - world frame = frame of the first camera,
//! - extrinsics map world to camera: `x_cam = R * x_world + t`,
//! - intrinsics are upper triangular with positive focal lengths,
//! - lengths in mm, image coordinates in px.

use nalgebra::{DMatrix, Matrix3, RowVector4, SMatrix, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{is_rotation, Pose};

/// 3D point in mm.
pub type Point3D = Vector3<f64>;

/// Minimum depth (mm) in front of a camera for a projection to be valid.
pub const MIN_DEPTH: f64 = 1e-9;

/// Minimum camera-center separation (mm) for epipolar geometry.
pub const MIN_BASELINE: f64 = 1e-6;

/// Minimum ray angle (rad) away from a parallel configuration.
pub const MIN_RAY_ANGLE: f64 = 1e-5;

/// Sampson denominators below this are treated as degenerate (both points
/// at the epipoles).
pub const MIN_SAMPSON_DENOM: f64 = 1e-18;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point depth is not positive")]
    NonPositiveDepth,
    #[error("camera centers coincide, no epipolar geometry")]
    DegenerateBaseline,
    #[error("both points sit on the epipoles, Sampson distance undefined")]
    DegenerateEpipolarPoint,
    #[error("viewing rays are parallel")]
    ParallelRays,
    #[error("triangulated point lies behind a camera")]
    CheiralityViolation,
    #[error("triangulation needs at least two views, got {0}")]
    InsufficientViews(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

/// Image point in px.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel2D {
    pub u: f64,
    pub v: f64,
}

impl Pixel2D {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn distance(&self, other: &Pixel2D) -> f64 {
        (self.vector() - other.vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// One calibrated camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub image_size: [u32; 2],
}

impl CameraView {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: [u32; 2],
    ) -> Result<Self, GeometryError> {
        if !intrinsics.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics"));
        }
        let lower = intrinsics[(1, 0)].abs() + intrinsics[(2, 0)].abs() + intrinsics[(2, 1)].abs();
        if lower > 1e-12 || (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidCamera("intrinsics not upper triangular"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera("non-positive focal length"));
        }
        if !is_rotation(&rotation, 1e-9) {
            return Err(GeometryError::InvalidCamera("extrinsic rotation not in SO(3)"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite translation"));
        }
        if image_size[0] == 0 || image_size[1] == 0 {
            return Err(GeometryError::InvalidCamera("empty image"));
        }
        Ok(Self { intrinsics, rotation, translation, image_size })
    }

    /// Camera centered at `center`, looking at `target`, x axis level with
    /// the plane normal to `up`. Image y runs downward (vision convention).
    pub fn look_at(
        intrinsics: Matrix3<f64>,
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        image_size: [u32; 2],
    ) -> Result<Self, GeometryError> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera("look-at target coincides with center"));
        }
        let z = forward.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera("viewing direction parallel to up"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * center;
        Self::new(intrinsics, rotation, translation, image_size)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// World-to-pixel projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> SMatrix<f64, 3, 4> {
        let kr = self.intrinsics * self.rotation;
        let kt = self.intrinsics * self.translation;
        let mut m = SMatrix::<f64, 3, 4>::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&kr);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&kt);
        m
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, world: &Point3D) -> f64 {
        (self.rotation * world + self.translation).z
    }

    pub fn contains(&self, p: &Pixel2D) -> bool {
        p.u >= 0.0
            && p.v >= 0.0
            && p.u < self.image_size[0] as f64
            && p.v < self.image_size[1] as f64
    }
}

/// Projects a world-frame point.
pub fn project_world(view: &CameraView, world: &Point3D) -> Result<Pixel2D, GeometryError> {
    let cam = view.rotation * world + view.translation;
    if cam.z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth);
    }
    let h = view.intrinsics * cam;
    Ok(Pixel2D::new(h.x / h.z, h.y / h.z))
}

/// Projects an object-frame model point under `object_pose`.
pub fn project(
    view: &CameraView,
    object_pose: &Pose,
    model_point: &Point3D,
) -> Result<Pixel2D, GeometryError> {
    project_world(view, &object_pose.apply(model_point))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix between two calibrated views, with
/// `q^T F p = 0` for corresponding pixels p (in `u`) and q (in `v`).
///
/// The result is Frobenius-normalized with a deterministic sign (largest
/// entry positive) so callers can compare matrices directly.
pub fn fundamental_from_cameras(
    u: &CameraView,
    v: &CameraView,
) -> Result<Matrix3<f64>, GeometryError> {
    if (u.center() - v.center()).norm() <= MIN_BASELINE {
        return Err(GeometryError::DegenerateBaseline);
    }
    let r_rel = v.rotation * u.rotation.transpose();
    let t_rel = v.translation - r_rel * u.translation;
    let essential = skew(&t_rel) * r_rel;
    let ku_inv = u.intrinsics.try_inverse().ok_or(GeometryError::InvalidCamera("singular K"))?;
    let kv_inv = v.intrinsics.try_inverse().ok_or(GeometryError::InvalidCamera("singular K"))?;
    let mut f = kv_inv.transpose() * essential * ku_inv;
    f /= f.norm();
    let dominant = f.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    if dominant < 0.0 {
        f = -f;
    }
    Ok(f)
}

/// First-order (Sampson) approximation of the squared epipolar distance,
/// in px^2. Symmetric: swapping p and q while transposing F gives the same
/// value.
pub fn sampson_distance(
    f: &Matrix3<f64>,
    p: &Pixel2D,
    q: &Pixel2D,
) -> Result<f64, GeometryError> {
    let ph = p.homogeneous();
    let qh = q.homogeneous();
    let fp = f * ph;
    let ftq = f.transpose() * qh;
    let denom = fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y;
    if denom <= MIN_SAMPSON_DENOM {
        return Err(GeometryError::DegenerateEpipolarPoint);
    }
    let num = qh.dot(&fp);
    Ok(num * num / denom)
}

/// Viewing ray direction of a pixel, in world coordinates (unnormalized).
fn ray_direction(view: &CameraView, p: &Pixel2D) -> Result<Vector3<f64>, GeometryError> {
    let k_inv = view.intrinsics.try_inverse().ok_or(GeometryError::InvalidCamera("singular K"))?;
    Ok(view.rotation.transpose() * (k_inv * p.homogeneous()))
}

/// Two DLT rows `u * m3 - m1`, `v * m3 - m2`. Dotted with the homogeneous
/// point they give depth times the pixel residual.
fn dlt_rows_unnormalized(view: &CameraView, p: &Pixel2D) -> [RowVector4<f64>; 2] {
    let m = view.projection_matrix();
    let r0 = m.row(0).clone_owned();
    let r1 = m.row(1).clone_owned();
    let r2 = m.row(2).clone_owned();
    [r2 * p.u - r0, r2 * p.v - r1]
}

/// Similarity (scale, center) mapping solving coordinates to world.
///
/// Solving the DLT with world coordinates in millimetres leaves the
/// homogeneous system badly column-scaled: every unit-norm row is then
/// nearly (eps, eps, eps, 1), the spatial information lives in tiny
/// differences, and under pixel noise the computed null vector can
/// collapse onto a single view's ray. Centering on the camera centroid at
/// a scale of the mean camera distance keeps the candidate solutions O(1)
/// in every component.
fn solving_frame(centers: &[Point3D]) -> (f64, Vector3<f64>) {
    let c = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let s = centers.iter().map(|x| (x - c).norm()).sum::<f64>() / centers.len() as f64;
    (s.max(1.0), c)
}

/// Rewrites a DLT row to act on solving-frame coordinates, with
/// `x_world = scale * x_solving + center`.
fn to_solving_frame(
    r: &RowVector4<f64>,
    scale: f64,
    center: &Vector3<f64>,
) -> RowVector4<f64> {
    RowVector4::new(
        scale * r[0],
        scale * r[1],
        scale * r[2],
        r[0] * center.x + r[1] * center.y + r[2] * center.z + r[3],
    )
}

fn smallest_right_singular_vector(a: &DMatrix<f64>) -> Vector4<f64> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("SVD with v_t requested");
    let mut idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[idx] {
            idx = i;
        }
    }
    Vector4::from_iterator(v_t.row(idx).iter().cloned())
}

fn dehomogenize(h: &Vector4<f64>) -> Result<Point3D, GeometryError> {
    let xyz = Vector3::new(h.x, h.y, h.z);
    if h.w.abs() <= 1e-13 * xyz.norm().max(1.0) {
        // Solution at infinity: the rays never meet at a finite point.
        return Err(GeometryError::ParallelRays);
    }
    Ok(xyz / h.w)
}

/// Triangulates one point from two views by the normalized linear (DLT)
/// method.
pub fn triangulate_two_view(
    p_u: &Pixel2D,
    p_w: &Pixel2D,
    view_u: &CameraView,
    view_w: &CameraView,
) -> Result<Point3D, GeometryError> {
    let d_u = ray_direction(view_u, p_u)?.normalize();
    let d_w = ray_direction(view_w, p_w)?.normalize();
    // Cross norm is the sine of the angle to the nearest parallel
    // configuration; it also rejects anti-parallel rays.
    if d_u.cross(&d_w).norm() <= MIN_RAY_ANGLE {
        return Err(GeometryError::ParallelRays);
    }

    let (scale, center) = solving_frame(&[view_u.center(), view_w.center()]);
    let [a0, a1] = dlt_rows_unnormalized(view_u, p_u);
    let [a2, a3] = dlt_rows_unnormalized(view_w, p_w);
    let mut a = SMatrix::<f64, 4, 4>::zeros();
    for (i, row) in [a0, a1, a2, a3].iter().enumerate() {
        let r = to_solving_frame(row, scale, &center);
        a.set_row(i, &r.unscale(r.norm().max(1e-300)));
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("SVD with v_t requested");
    let mut idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[idx] {
            idx = i;
        }
    }
    let h = Vector4::from_iterator(v_t.row(idx).iter().cloned());
    let point = scale * dehomogenize(&h)? + center;

    if view_u.depth(&point) <= MIN_DEPTH || view_w.depth(&point) <= MIN_DEPTH {
        return Err(GeometryError::CheiralityViolation);
    }
    Ok(point)
}

/// Multi-view DLT triangulation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint {
    pub point: Point3D,
    /// True when a view index appeared more than once in the input; the
    /// repeated rows then act as weighting.
    pub duplicate_views: bool,
}

/// Triangulates one point from observations `(view index, pixel)` over two
/// or more distinct views.
///
/// Solves the stacked DLT system with unit-norm rows, then rescales each
/// row pair by the inverse of the estimated depth and re-solves. The
/// reweighting makes the algebraic residual equal the pixel reprojection
/// residual to first order, so the answer is a least-squares reprojection
/// fit rather than an arbitrarily weighted one.
pub fn triangulate_multiview(
    observations: &[(usize, Pixel2D)],
    views: &[CameraView],
) -> Result<TriangulatedPoint, GeometryError> {
    let mut distinct: Vec<usize> = observations.iter().map(|(v, _)| *v).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(GeometryError::InsufficientViews(distinct.len()));
    }
    let duplicate_views = distinct.len() != observations.len();

    let centers: Vec<Point3D> = distinct.iter().map(|v| views[*v].center()).collect();
    let (scale, center) = solving_frame(&centers);
    let raw: Vec<[RowVector4<f64>; 2]> = observations
        .iter()
        .map(|(view_idx, pixel)| {
            let [r0, r1] = dlt_rows_unnormalized(&views[*view_idx], pixel);
            [to_solving_frame(&r0, scale, &center), to_solving_frame(&r1, scale, &center)]
        })
        .collect();

    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, [r0, r1]) in raw.iter().enumerate() {
        a.set_row(2 * i, &r0.unscale(r0.norm().max(1e-300)));
        a.set_row(2 * i + 1, &r1.unscale(r1.norm().max(1e-300)));
    }
    let mut point = scale * dehomogenize(&smallest_right_singular_vector(&a))? + center;

    for _ in 0..2 {
        let mut ok = true;
        for (i, (view_idx, _)) in observations.iter().enumerate() {
            let depth = views[*view_idx].depth(&point);
            if depth <= MIN_DEPTH {
                ok = false;
                break;
            }
            a.set_row(2 * i, &raw[i][0].unscale(depth));
            a.set_row(2 * i + 1, &raw[i][1].unscale(depth));
        }
        if !ok {
            break;
        }
        match dehomogenize(&smallest_right_singular_vector(&a)) {
            Ok(p) => point = scale * p + center,
            Err(_) => break,
        }
    }

    for view_idx in &distinct {
        if views[*view_idx].depth(&point) <= MIN_DEPTH {
            return Err(GeometryError::CheiralityViolation);
        }
    }
    Ok(TriangulatedPoint { point, duplicate_views })
}
