//! Three-stage progressive pose estimation.
//!
//! Stage 1 reconstructs a dense object point cloud by RANSAC over view
//! pairs: triangulate every co-visible keypoint from a sampled pair, score
//! the hypothesis by inlier count over all (keypoint, view) reprojections,
//! and rebuild the winning cloud by multi-view triangulation over each
//! keypoint's inlier view set. Stage 2 rigidly aligns the model keypoints
//! to the cloud with a 3-point RANSAC around the Umeyama solver. Stage 3
//! polishes the pose by minimizing a Huber-robustified reprojection error
//! with a damped Gauss-Newton loop on SO(3) x R^3.
//!
//! Determinism: every RANSAC iteration draws from its own stream derived
//! from (seed, iteration), so winners are identical no matter how
//! iterations are scheduled; improvement comparisons are strict, so the
//! first best hypothesis wins ties.

use std::collections::HashMap;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    project_world, triangulate_multiview, CameraView, Pixel2D, Point3D,
};
use crate::matching::{InstanceAssociation, InstanceObservation};
use crate::pose::{so3_exp, Pose};
use crate::rng::stream_rng;

/// Reprojection residual charged when a hypothesis point lands behind a
/// camera. Large enough to disqualify, bounded so a single bad point
/// cannot zero an otherwise sound hypothesis score.
const PROJECTION_MISS_RESIDUAL_PX: f64 = 1e4;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("no RANSAC hypothesis produced any inlier")]
    NoValidHypothesis,
    #[error("need {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate point configuration (collinear or coincident)")]
    DegenerateConfiguration,
    #[error("refinement has no residual terms")]
    NoResidualTerms,
    #[error("association spans {0} views, need at least 2")]
    InsufficientViews(usize),
    #[error("source and target point counts differ")]
    LengthMismatch,
}

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStage {
    Reconstruct,
    Align,
    Refine,
}

impl std::fmt::Display for SolveStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStage::Reconstruct => "stage 1 (reconstruct)",
            SolveStage::Align => "stage 2 (align)",
            SolveStage::Refine => "stage 3 (refine)",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("{stage}: {source}")]
pub struct StagedError {
    pub stage: SolveStage,
    #[source]
    pub source: SolverError,
}

/// How far the estimate got.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Aligned,
    Refined,
}

/// Solver tuning. Defaults sit at the scale of the (5mm, 10deg) success
/// metric: tau1 2 px, tau2 5 mm, Huber width equal to tau1.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub stage1_inlier_px: f64,
    pub stage2_inlier_mm: f64,
    pub stage1_iterations: u32,
    pub stage2_iterations: u32,
    pub huber_width_px: f64,
    pub refine: bool,
    pub refine_max_iters: u32,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            stage1_inlier_px: 2.0,
            stage2_inlier_mm: 5.0,
            stage1_iterations: 64,
            stage2_iterations: 256,
            huber_width_px: 2.0,
            refine: true,
            refine_max_iters: 100,
            seed: 0,
        }
    }
}

/// One keypoint reconstructed by stage 1.
#[derive(Debug, Clone)]
pub struct ReconstructedPoint {
    /// Index into the model keypoint list.
    pub keypoint: usize,
    pub point: Point3D,
    /// Views whose reprojection fell below tau1 for the winning hypothesis.
    pub views: Vec<usize>,
}

/// Winning stage-1 hypothesis after multi-view re-triangulation.
#[derive(Debug, Clone)]
pub struct StageOneResult {
    pub points: Vec<ReconstructedPoint>,
    /// Inlier count over (keypoint, view) pairs for the winning hypothesis.
    pub n_inliers: usize,
    pub score: f64,
    /// View pair whose triangulations won; keypoints corrupted in either
    /// of these views cannot be recovered by this hypothesis.
    pub pair: (usize, usize),
}

/// Final or intermediate pose estimate with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub stage: StageTag,
    /// Stage-2 3D inlier count.
    pub inlier_count_3d: usize,
    /// Huber cost over the refinement terms; filled once terms exist.
    pub robust_cost: Option<f64>,
    /// Mean reprojection residual per view (px); None where the view
    /// contributes no term.
    pub per_view_residual_px: Vec<Option<f64>>,
    /// Accepted refinement steps (0 for aligned-only estimates).
    pub refine_iterations: u32,
}

/// RANSAC hypothesis score: inliers against total residual mass.
pub fn hypothesis_score(n_inliers: usize, residual_sum_px: f64) -> f64 {
    n_inliers as f64 / (1.0 + residual_sum_px)
}

#[derive(Clone)]
struct Hypothesis {
    score: f64,
    n_inliers: usize,
    /// Global view indices of the triangulating pair.
    pair: (usize, usize),
    /// Per keypoint, global view indices within tau1.
    view_sets: Vec<Vec<usize>>,
}

/// Stage 1: reconstruct one point per keypoint by RANSAC over view pairs.
pub fn stage1_reconstruct(
    assoc: &InstanceAssociation,
    views: &[CameraView],
    observations: &[Vec<InstanceObservation>],
    tau1_px: f64,
    iterations: u32,
    rng_seed: u64,
) -> Result<StageOneResult, SolverError> {
    assert!(tau1_px > 0.0 && iterations >= 1, "tau1 and iterations must be positive");
    let attached: Vec<(usize, usize)> = assoc.attached().collect();
    if attached.len() < 2 {
        return Err(SolverError::InsufficientViews(attached.len()));
    }
    let obs = |a: (usize, usize)| -> &InstanceObservation { &observations[a.0][a.1] };
    let n_kp = attached.iter().map(|&a| obs(a).keypoints.len()).min().unwrap_or(0);

    let mut pairs = Vec::new();
    for a in 0..attached.len() {
        for b in (a + 1)..attached.len() {
            pairs.push((a, b));
        }
    }

    // Identical pairs yield identical hypotheses, so each distinct pair is
    // evaluated once and repeated draws hit the cache. Winner selection is
    // unchanged: strict improvement, first best wins.
    let mut cache: HashMap<(usize, usize), Hypothesis> = HashMap::new();
    let mut best: Option<Hypothesis> = None;

    let rounds = if pairs.len() == 1 { 1 } else { iterations };
    for iter in 0..rounds {
        let pair = if pairs.len() == 1 {
            pairs[0]
        } else {
            let mut rng = stream_rng(rng_seed, iter as u64);
            pairs[rng.random_range(0..pairs.len())]
        };
        let h = cache
            .entry(pair)
            .or_insert_with(|| evaluate_pair(pair, &attached, views, observations, n_kp, tau1_px));
        if h.n_inliers > 0 && best.as_ref().map_or(true, |b| h.score > b.score) {
            best = Some(h.clone());
        }
    }
    let best = best.ok_or(SolverError::NoValidHypothesis)?;

    // Rebuild each surviving point from all of its inlier views.
    let mut points = Vec::new();
    for (k, set) in best.view_sets.iter().enumerate() {
        if set.len() < 2 {
            continue;
        }
        let obs_list: Vec<(usize, Pixel2D)> = set
            .iter()
            .map(|&v| {
                let slot = assoc.instances[v].expect("inlier views are attached");
                (v, observations[v][slot].keypoints[k])
            })
            .collect();
        if let Ok(t) = triangulate_multiview(&obs_list, views) {
            points.push(ReconstructedPoint { keypoint: k, point: t.point, views: set.clone() });
        }
    }
    Ok(StageOneResult {
        points,
        n_inliers: best.n_inliers,
        score: best.score,
        pair: best.pair,
    })
}

fn evaluate_pair(
    pair: (usize, usize),
    attached: &[(usize, usize)],
    views: &[CameraView],
    observations: &[Vec<InstanceObservation>],
    n_kp: usize,
    tau1_px: f64,
) -> Hypothesis {
    let (ua, wa) = pair;
    let (uv, us) = attached[ua];
    let (wv, ws) = attached[wa];
    let obs_u = &observations[uv][us];
    let obs_w = &observations[wv][ws];

    let mut n_inliers = 0usize;
    let mut residual_sum = 0.0;
    let mut view_sets = vec![Vec::new(); n_kp];

    for k in 0..n_kp {
        if !(obs_u.visibility[k] && obs_w.visibility[k]) {
            continue;
        }
        let Ok(point) = crate::geometry::triangulate_two_view(
            &obs_u.keypoints[k],
            &obs_w.keypoints[k],
            &views[uv],
            &views[wv],
        ) else {
            continue;
        };
        for &(v, slot) in attached {
            let o = &observations[v][slot];
            if !o.visibility[k] {
                continue;
            }
            let residual = match project_world(&views[v], &point) {
                Ok(p) => p.distance(&o.keypoints[k]),
                Err(_) => PROJECTION_MISS_RESIDUAL_PX,
            };
            residual_sum += residual;
            if residual < tau1_px {
                view_sets[k].push(v);
                n_inliers += 1;
            }
        }
    }
    Hypothesis {
        score: hypothesis_score(n_inliers, residual_sum),
        n_inliers,
        pair: (uv, wv),
        view_sets,
    }
}

/// Least-squares rigid alignment R*source + t = target (Umeyama, scale
/// fixed at 1). The reflection case is corrected by flipping the smallest
/// singular direction, so det(R) = +1 always holds.
pub fn umeyama_align(source: &[Point3D], target: &[Point3D]) -> Result<Pose, SolverError> {
    if source.len() != target.len() {
        return Err(SolverError::LengthMismatch);
    }
    let n = source.len();
    if n < 3 {
        return Err(SolverError::InsufficientPoints { needed: 3, got: n });
    }
    let sc = source.iter().sum::<Vector3<f64>>() / n as f64;
    let tc = target.iter().sum::<Vector3<f64>>() / n as f64;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (t - tc) * (s - sc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());

    // nalgebra does not order singular values; sort descending so the sign
    // correction lands on the smallest direction.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let sigma1 = svd.singular_values[order[0]];
    let sigma2 = svd.singular_values[order[1]];
    if sigma2 <= 1e-9 * sigma1 || sigma1 <= 0.0 {
        return Err(SolverError::DegenerateConfiguration);
    }
    let mut u_s = Matrix3::zeros();
    let mut v_s = Matrix3::zeros();
    for (col, &idx) in order.iter().enumerate() {
        u_s.set_column(col, &u.column(idx));
        v_s.set_column(col, &v_t.row(idx).transpose());
    }
    let d = (u_s * v_s.transpose()).determinant();
    let mut s = Matrix3::identity();
    s[(2, 2)] = if d < 0.0 { -1.0 } else { 1.0 };
    let rotation = u_s * s * v_s.transpose();
    Ok(Pose::new(rotation, tc - rotation * sc))
}

/// Stage 2: 3-point RANSAC around Umeyama. Best hypothesis by inlier
/// count, ties by inlier RMS; the winner is refit over its inlier set.
/// Returns the aligned estimate and the inlier indices into
/// `stage1.points`.
pub fn stage2_align(
    stage1: &StageOneResult,
    model_keypoints: &[Point3D],
    tau2_mm: f64,
    iterations: u32,
    rng_seed: u64,
) -> Result<(PoseEstimate, Vec<usize>), SolverError> {
    assert!(tau2_mm > 0.0 && iterations >= 1, "tau2 and iterations must be positive");
    let n = stage1.points.len();
    if n < 3 {
        return Err(SolverError::InsufficientPoints { needed: 3, got: n });
    }
    let source: Vec<Point3D> =
        stage1.points.iter().map(|p| model_keypoints[p.keypoint]).collect();
    let target: Vec<Point3D> = stage1.points.iter().map(|p| p.point).collect();

    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    let mut saw_degenerate = false;
    for iter in 0..iterations {
        let mut rng = stream_rng(rng_seed, iter as u64);
        let i0 = rng.random_range(0..n);
        let mut i1 = rng.random_range(0..n);
        while i1 == i0 {
            i1 = rng.random_range(0..n);
        }
        let mut i2 = rng.random_range(0..n);
        while i2 == i0 || i2 == i1 {
            i2 = rng.random_range(0..n);
        }
        let pose = match umeyama_align(
            &[source[i0], source[i1], source[i2]],
            &[target[i0], target[i1], target[i2]],
        ) {
            Ok(p) => p,
            Err(SolverError::DegenerateConfiguration) => {
                saw_degenerate = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut inliers = Vec::new();
        let mut sq_sum = 0.0;
        for (i, (s, t)) in source.iter().zip(&target).enumerate() {
            let d2 = (pose.apply(s) - t).norm_squared();
            if d2.sqrt() < tau2_mm {
                inliers.push(i);
                sq_sum += d2;
            }
        }
        if inliers.is_empty() {
            continue;
        }
        let rms = (sq_sum / inliers.len() as f64).sqrt();
        let better = match &best {
            None => true,
            Some((bn, brms, _)) => {
                inliers.len() > *bn || (inliers.len() == *bn && rms < *brms)
            }
        };
        if better {
            best = Some((inliers.len(), rms, inliers));
        }
    }

    let Some((count, _, inliers)) = best else {
        return Err(if saw_degenerate {
            SolverError::DegenerateConfiguration
        } else {
            SolverError::NoValidHypothesis
        });
    };
    if count < 3 {
        return Err(SolverError::NoValidHypothesis);
    }
    let src: Vec<Point3D> = inliers.iter().map(|&i| source[i]).collect();
    let tgt: Vec<Point3D> = inliers.iter().map(|&i| target[i]).collect();
    let pose = umeyama_align(&src, &tgt)?;
    let estimate = PoseEstimate {
        pose,
        stage: StageTag::Aligned,
        inlier_count_3d: count,
        robust_cost: None,
        per_view_residual_px: Vec::new(),
        refine_iterations: 0,
    };
    Ok((estimate, inliers))
}

/// One reprojection residual of the refinement objective: a model point
/// observed in one view.
#[derive(Debug, Clone)]
pub struct ReprojectionTerm {
    pub view: usize,
    pub model_point: Point3D,
    pub observed: Pixel2D,
}

/// Builds the stage-3 objective terms: every stage-2 inlier keypoint paired
/// with each view in its stage-1 inlier view set.
pub fn collect_refinement_terms(
    assoc: &InstanceAssociation,
    observations: &[Vec<InstanceObservation>],
    stage1: &StageOneResult,
    inliers_3d: &[usize],
    model_keypoints: &[Point3D],
) -> Vec<ReprojectionTerm> {
    let mut terms = Vec::new();
    for &idx in inliers_3d {
        let rp = &stage1.points[idx];
        for &v in &rp.views {
            let slot = assoc.instances[v].expect("inlier views are attached");
            terms.push(ReprojectionTerm {
                view: v,
                model_point: model_keypoints[rp.keypoint],
                observed: observations[v][slot].keypoints[rp.keypoint],
            });
        }
    }
    terms
}

/// Huber kernel: quadratic inside `width`, linear outside.
pub fn huber(e: f64, width: f64) -> f64 {
    if e <= width {
        0.5 * e * e
    } else {
        width * (e - 0.5 * width)
    }
}

fn huber_weight(e: f64, width: f64) -> f64 {
    if e <= width {
        1.0
    } else {
        width / e
    }
}

/// Robust reprojection cost of a pose over the given terms.
pub fn robust_cost(
    views: &[CameraView],
    terms: &[ReprojectionTerm],
    pose: &Pose,
    width: f64,
) -> f64 {
    terms
        .iter()
        .map(|t| {
            let e = match project_world(&views[t.view], &pose.apply(&t.model_point)) {
                Ok(p) => p.distance(&t.observed),
                Err(_) => PROJECTION_MISS_RESIDUAL_PX,
            };
            huber(e, width)
        })
        .sum()
}

/// Mean unweighted reprojection residual per view; None where a view has
/// no terms.
pub fn per_view_residuals(
    views: &[CameraView],
    terms: &[ReprojectionTerm],
    pose: &Pose,
) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0f64, 0usize); views.len()];
    for t in terms {
        if let Ok(p) = project_world(&views[t.view], &pose.apply(&t.model_point)) {
            sums[t.view].0 += p.distance(&t.observed);
            sums[t.view].1 += 1;
        }
    }
    sums.into_iter()
        .map(|(s, c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect()
}

/// Projection of a posed model point plus its Jacobian with respect to the
/// local pose increment (theta, t): R <- exp(theta) R, t <- t + dt.
pub fn reprojection_jacobian(
    view: &CameraView,
    pose: &Pose,
    model_point: &Point3D,
) -> Result<(Pixel2D, SMatrix<f64, 2, 6>), crate::geometry::GeometryError> {
    let rotated = pose.rotation * model_point;
    let world = rotated + pose.translation;
    let cam = view.rotation * world + view.translation;
    let projected = project_world(view, &world)?;

    let k = &view.intrinsics;
    let (x, y, z) = (cam.x, cam.y, cam.z);
    // Derivative of (k11 X/Z + k12 Y/Z + k13, k22 Y/Z + k23) w.r.t. cam
    // coordinates.
    let dpi = SMatrix::<f64, 2, 3>::new(
        k[(0, 0)] / z,
        k[(0, 1)] / z,
        -(k[(0, 0)] * x + k[(0, 1)] * y) / (z * z),
        0.0,
        k[(1, 1)] / z,
        -k[(1, 1)] * y / (z * z),
    );
    // cam = R_view (exp(theta) R p + t) + t_view:
    // d cam / d theta = -R_view [R p]_x, d cam / d t = R_view.
    let skew = Matrix3::new(
        0.0, -rotated.z, rotated.y,
        rotated.z, 0.0, -rotated.x,
        -rotated.y, rotated.x, 0.0,
    );
    let d_theta = dpi * (view.rotation * (-skew));
    let d_t = dpi * view.rotation;
    let mut jac = SMatrix::<f64, 2, 6>::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_theta);
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_t);
    Ok((projected, jac))
}

/// Stage 3: damped Gauss-Newton on the Huber objective. Steps are accepted
/// only when they strictly decrease the cost, so the returned cost never
/// exceeds the initial one; terminates when the relative decrease drops
/// below 1e-10 or no damping level yields a decrease.
pub fn stage3_refine(
    initial: &PoseEstimate,
    views: &[CameraView],
    terms: &[ReprojectionTerm],
    kernel_width_px: f64,
    max_iters: u32,
) -> Result<PoseEstimate, SolverError> {
    assert!(kernel_width_px > 0.0, "kernel width must be positive");
    if terms.is_empty() {
        return Err(SolverError::NoResidualTerms);
    }
    let mut pose = initial.pose;
    let mut cost = robust_cost(views, terms, &pose, kernel_width_px);
    let mut lambda = 1e-6;
    let mut accepted = 0u32;

    for _ in 0..max_iters {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for t in terms {
            let Ok((proj, jac)) = reprojection_jacobian(&views[t.view], &pose, &t.model_point)
            else {
                // Behind-camera terms carry a constant penalty; no gradient.
                continue;
            };
            let r = SVector::<f64, 2>::new(proj.u - t.observed.u, proj.v - t.observed.v);
            let w = huber_weight(r.norm(), kernel_width_px);
            h += jac.transpose() * jac * w;
            g += jac.transpose() * r * w;
        }
        if g.norm() <= 1e-14 * (1.0 + cost) {
            break;
        }

        let mut improved = false;
        for _ in 0..12 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = Pose::new(
                so3_exp(&Vector3::new(step[0], step[1], step[2])) * pose.rotation,
                pose.translation + Vector3::new(step[3], step[4], step[5]),
            );
            let c = robust_cost(views, terms, &candidate, kernel_width_px);
            if c < cost {
                let previous = cost;
                pose = candidate;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                accepted += 1;
                improved = true;
                if previous - c <= 1e-10 * previous {
                    return Ok(finish_refined(initial, pose, cost, accepted));
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Ok(finish_refined(initial, pose, cost, accepted))
}

fn finish_refined(initial: &PoseEstimate, pose: Pose, cost: f64, accepted: u32) -> PoseEstimate {
    PoseEstimate {
        pose,
        stage: StageTag::Refined,
        inlier_count_3d: initial.inlier_count_3d,
        robust_cost: Some(cost),
        per_view_residual_px: Vec::new(),
        refine_iterations: accepted,
    }
}

/// Full solve for one association: reconstruct, align, optionally refine.
/// Errors carry the stage they came from.
pub fn estimate_pose(
    assoc: &InstanceAssociation,
    views: &[CameraView],
    observations: &[Vec<InstanceObservation>],
    model_keypoints: &[Point3D],
    config: &SolverConfig,
) -> Result<PoseEstimate, StagedError> {
    let tag = |stage: SolveStage| move |source: SolverError| StagedError { stage, source };

    let stage1 = stage1_reconstruct(
        assoc,
        views,
        observations,
        config.stage1_inlier_px,
        config.stage1_iterations,
        config.seed,
    )
    .map_err(tag(SolveStage::Reconstruct))?;

    let (mut aligned, inliers) = stage2_align(
        &stage1,
        model_keypoints,
        config.stage2_inlier_mm,
        config.stage2_iterations,
        crate::rng::derive_seed(config.seed, 0x5741),
    )
    .map_err(tag(SolveStage::Align))?;

    let terms =
        collect_refinement_terms(assoc, observations, &stage1, &inliers, model_keypoints);
    aligned.robust_cost =
        Some(robust_cost(views, &terms, &aligned.pose, config.huber_width_px));
    aligned.per_view_residual_px = per_view_residuals(views, &terms, &aligned.pose);
    if !config.refine {
        return Ok(aligned);
    }

    let mut refined =
        stage3_refine(&aligned, views, &terms, config.huber_width_px, config.refine_max_iters)
            .map_err(tag(SolveStage::Refine))?;
    refined.per_view_residual_px = per_view_residuals(views, &terms, &refined.pose);
    Ok(refined)
}
