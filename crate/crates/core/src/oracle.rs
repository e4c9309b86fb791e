//! Brute-force reference implementations used by tests.
//!
//! Everything here recomputes results from first principles instead of
//! calling the module it checks: matching is replayed literally over the
//! full score matrix, the refinement objective is minimized by exhaustive
//! grid search or numerical descent, and gradients come from central
//! differences. Constants that define shared conventions (degeneracy
//! epsilons, the behind-camera penalty) are restated here on purpose; they
//! are part of the contract, not of the implementation under test.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{CameraView, Pixel2D, Point3D};
use crate::matching::InstanceObservation;
use crate::pose::{so3_exp, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("pose grid has {cells} cells, cap is {cap}")]
    GridTooLarge { cells: u64, cap: u64 },
}

/// Epipoles carry no epipolar information; mirrors the geometry module's
/// degeneracy threshold by definition.
const DEGENERATE_DENOM: f64 = 1e-18;
/// Depth floor and behind-camera penalty, restated from the solver
/// conventions.
const MIN_DEPTH: f64 = 1e-9;
const MISS_RESIDUAL_PX: f64 = 1e4;

fn sampson(f: &Matrix3<f64>, a: &Pixel2D, b: &Pixel2D) -> Option<f64> {
    let ah = Vector3::new(a.u, a.v, 1.0);
    let bh = Vector3::new(b.u, b.v, 1.0);
    let fa = f * ah;
    let ftb = f.transpose() * bh;
    let denom = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
    if denom <= DEGENERATE_DENOM {
        return None;
    }
    let num = bh.dot(&fa);
    Some(num * num / denom)
}

fn median_score(
    a: &InstanceObservation,
    b: &InstanceObservation,
    f: &Matrix3<f64>,
) -> Option<f64> {
    let n = a.keypoints.len().min(b.keypoints.len());
    let mut dists: Vec<f64> = (0..n)
        .filter(|&k| a.visibility[k] && b.visibility[k])
        .filter_map(|k| sampson(f, &a.keypoints[k], &b.keypoints[k]))
        .collect();
    if dists.is_empty() {
        return None;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = dists.len();
    Some(if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) })
}

/// Literal mutual-nearest matching over the full score matrix (median
/// per-keypoint Sampson distance, the matcher's decision rule). Intended
/// for small instance counts.
pub fn brute_force_match(
    us: &[InstanceObservation],
    vs: &[InstanceObservation],
    f: &Matrix3<f64>,
) -> Vec<(usize, usize)> {
    assert!(us.len() <= 8 && vs.len() <= 8, "oracle is for small instance counts");
    let mut scores = vec![vec![None; vs.len()]; us.len()];
    for (i, a) in us.iter().enumerate() {
        for (j, b) in vs.iter().enumerate() {
            scores[i][j] = median_score(a, b, f);
        }
    }
    let best_in_row = |i: usize| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..vs.len() {
            if let Some(s) = scores[i][j] {
                if best.map_or(true, |(bs, _)| s < bs) {
                    best = Some((s, j));
                }
            }
        }
        best.map(|(_, j)| j)
    };
    let best_in_col = |j: usize| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, row) in scores.iter().enumerate() {
            if let Some(s) = row[j] {
                if best.map_or(true, |(bs, _)| s < bs) {
                    best = Some((s, i));
                }
            }
        }
        best.map(|(_, i)| i)
    };
    (0..us.len())
        .filter_map(|i| best_in_row(i).map(|j| (i, j)))
        .filter(|&(i, j)| best_in_col(j) == Some(i))
        .collect()
}

/// Central-difference gradient of `f` at `params`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for d in 0..params.len() {
        work[d] = params[d] + h;
        let plus = f(&work);
        work[d] = params[d] - h;
        let minus = f(&work);
        work[d] = params[d];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// The refinement objective restated from scratch: Huber-robustified
/// reprojection error of `pose` over `(view, model point, observed pixel)`
/// terms, with the behind-camera penalty.
pub fn reprojection_objective(
    views: &[CameraView],
    terms: &[(usize, Point3D, Pixel2D)],
    pose: &Pose,
    huber_width_px: f64,
) -> f64 {
    let mut total = 0.0;
    for &(v, p, obs) in terms {
        let view = &views[v];
        let cam = view.rotation * (pose.rotation * p + pose.translation) + view.translation;
        let e = if cam.z <= MIN_DEPTH {
            MISS_RESIDUAL_PX
        } else {
            let h = view.intrinsics * cam;
            let du = h.x / h.z - obs.u;
            let dv = h.y / h.z - obs.v;
            (du * du + dv * dv).sqrt()
        };
        total += if e <= huber_width_px {
            0.5 * e * e
        } else {
            huber_width_px * (e - 0.5 * huber_width_px)
        };
    }
    total
}

fn retract(pose: &Pose, d: &[f64]) -> Pose {
    Pose::new(
        so3_exp(&Vector3::new(d[0], d[1], d[2])) * pose.rotation,
        pose.translation + Vector3::new(d[3], d[4], d[5]),
    )
}

/// Local pose grid around a hint.
#[derive(Debug, Clone)]
pub struct GridSearchSpec {
    pub rotation_step_deg: f64,
    pub rotation_bound_deg: f64,
    pub translation_step_mm: f64,
    pub translation_bound_mm: f64,
    pub huber_width_px: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub pose: Pose,
    pub cost: f64,
}

const GRID_CELL_CAP: u64 = 10_000_000;

/// Exhaustive minimization of [`reprojection_objective`] over a pose grid
/// centered on `hint`: axis-angle offsets on a cubic lattice times a cubic
/// translation lattice. Strict improvement keeps the first minimum, so the
/// result is deterministic.
pub fn grid_pose_search(
    views: &[CameraView],
    terms: &[(usize, Point3D, Pixel2D)],
    hint: &Pose,
    spec: &GridSearchSpec,
) -> Result<GridSearchResult, OracleError> {
    assert!(spec.rotation_step_deg > 0.0 && spec.translation_step_mm > 0.0);
    let nr = (spec.rotation_bound_deg / spec.rotation_step_deg + 1e-9).floor() as i64;
    let nt = (spec.translation_bound_mm / spec.translation_step_mm + 1e-9).floor() as i64;
    let per_axis_r = 2 * nr as u64 + 1;
    let per_axis_t = 2 * nt as u64 + 1;
    let cells = per_axis_r.pow(3).saturating_mul(per_axis_t.pow(3));
    if cells > GRID_CELL_CAP {
        return Err(OracleError::GridTooLarge { cells, cap: GRID_CELL_CAP });
    }

    let r_step = spec.rotation_step_deg.to_radians();
    let t_step = spec.translation_step_mm;
    let mut best: Option<GridSearchResult> = None;
    for rx in -nr..=nr {
        for ry in -nr..=nr {
            for rz in -nr..=nr {
                for tx in -nt..=nt {
                    for ty in -nt..=nt {
                        for tz in -nt..=nt {
                            let d = [
                                rx as f64 * r_step,
                                ry as f64 * r_step,
                                rz as f64 * r_step,
                                tx as f64 * t_step,
                                ty as f64 * t_step,
                                tz as f64 * t_step,
                            ];
                            let pose = retract(hint, &d);
                            let cost = reprojection_objective(
                                views,
                                terms,
                                &pose,
                                spec.huber_width_px,
                            );
                            if best.as_ref().map_or(true, |b| cost < b.cost) {
                                best = Some(GridSearchResult { pose, cost });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(best.expect("grid has at least the center cell"))
}

/// Minimizes [`reprojection_objective`] by preconditioned numerical
/// gradient descent with an Armijo line search: no analytic derivatives,
/// no Gauss-Newton structure. Returns the final cost. Slow by design;
/// used to cross-check the refinement stage's minimum.
pub fn numeric_descent_cost(
    views: &[CameraView],
    terms: &[(usize, Point3D, Pixel2D)],
    start: &Pose,
    huber_width_px: f64,
    max_iters: u32,
) -> f64 {
    let cost_at =
        |pose: &Pose| reprojection_objective(views, terms, pose, huber_width_px);
    let fd_h = 1e-6;
    let mut pose = *start;
    let mut cost = cost_at(&pose);

    // Diagonal second differences even out the wildly different curvatures
    // of the rotation and translation axes.
    let curvature = |pose: &Pose, cost0: f64| -> [f64; 6] {
        let mut c = [0.0; 6];
        for d in 0..6 {
            let mut plus = [0.0; 6];
            plus[d] = fd_h;
            let mut minus = [0.0; 6];
            minus[d] = -fd_h;
            let second =
                (cost_at(&retract(pose, &plus)) - 2.0 * cost0 + cost_at(&retract(pose, &minus)))
                    / (fd_h * fd_h);
            c[d] = second.max(1e-9);
        }
        c
    };
    let mut precond = curvature(&pose, cost);
    let mut step = 1.0;
    let mut stalled = 0u32;

    for it in 0..max_iters {
        let grad = fd_gradient(|d| cost_at(&retract(&pose, d)), &[0.0; 6], fd_h);
        let mut dir = [0.0; 6];
        let mut slope = 0.0;
        for d in 0..6 {
            dir[d] = -grad[d] / precond[d];
            slope += grad[d] * dir[d];
        }
        if slope >= 0.0 {
            break;
        }
        let mut a = step;
        let mut accepted = false;
        for _ in 0..60 {
            let scaled: Vec<f64> = dir.iter().map(|v| v * a).collect();
            let candidate = retract(&pose, &scaled);
            let c = cost_at(&candidate);
            if c < cost + 1e-4 * a * slope {
                let drop = cost - c;
                pose = candidate;
                cost = c;
                accepted = true;
                stalled = if drop <= 1e-15 * cost.max(1e-300) { stalled + 1 } else { 0 };
                break;
            }
            a *= 0.5;
            if a < 1e-18 {
                break;
            }
        }
        if !accepted || stalled >= 3 {
            break;
        }
        step = (a * 2.0).min(4.0);
        if it % 256 == 255 {
            precond = curvature(&pose, cost);
        }
    }
    cost
}
