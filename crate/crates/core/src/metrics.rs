//! Pose-error metrics and scene-level recall.
//!
//! ADD is the mean distance between model points placed by two poses;
//! symmetric objects take the minimum over the ground-truth pose's
//! symmetry orbit. Recall counts ground-truth instances whose peak
//! visibility clears 75%, so heavily occluded objects neither help nor
//! hurt a method.

use thiserror::Error;

use crate::geometry::Point3D;
use crate::pose::{geodesic_angle, Pose};
use crate::symmetry::{equivalent_poses, SymmetryGroup};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("model point set is empty")]
    EmptyModel,
}

/// Mean distance (mm) between model points placed by the two poses.
pub fn add_error(est: &Pose, gt: &Pose, model_points: &[Point3D]) -> Result<f64, MetricsError> {
    if model_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let sum: f64 =
        model_points.iter().map(|p| (est.apply(p) - gt.apply(p)).norm()).sum();
    Ok(sum / model_points.len() as f64)
}

/// ADD against the best-matching pose in the ground truth's symmetry
/// orbit.
pub fn sym_add_error(
    est: &Pose,
    gt: &Pose,
    model_points: &[Point3D],
    group: &SymmetryGroup,
) -> Result<f64, MetricsError> {
    let mut best = f64::INFINITY;
    for g in equivalent_poses(gt, group) {
        best = best.min(add_error(est, &g, model_points)?);
    }
    Ok(best)
}

/// True when some symmetry-equivalent ground truth is within both the
/// translation and the geodesic rotation tolerance.
pub fn pose_within(
    est: &Pose,
    gt: &Pose,
    group: &SymmetryGroup,
    trans_tol_mm: f64,
    rot_tol_deg: f64,
) -> bool {
    assert!(trans_tol_mm > 0.0 && rot_tol_deg > 0.0, "tolerances must be positive");
    let rot_tol = rot_tol_deg.to_radians();
    equivalent_poses(gt, group).iter().any(|g| {
        (est.translation - g.translation).norm() <= trans_tol_mm
            && geodesic_angle(&est.rotation, &g.rotation) <= rot_tol
    })
}

/// Success criterion for counting an estimate as correct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Symmetry-aware ADD below an absolute threshold (mm).
    Add { threshold_mm: f64 },
    /// Translation and rotation both within tolerance.
    PoseTolerance { trans_mm: f64, rot_deg: f64 },
}

impl Metric {
    /// The (5 mm, 10 deg) criterion.
    pub fn standard() -> Self {
        Metric::PoseTolerance { trans_mm: 5.0, rot_deg: 10.0 }
    }

    /// The stricter (2 mm, 3 deg) criterion.
    pub fn strict() -> Self {
        Metric::PoseTolerance { trans_mm: 2.0, rot_deg: 3.0 }
    }

    /// ADD at a tenth of the model diameter, the usual ADD acceptance
    /// threshold.
    pub fn add_tenth_diameter(diameter_mm: f64) -> Self {
        Metric::Add { threshold_mm: 0.1 * diameter_mm }
    }

    pub fn passes(
        &self,
        est: &Pose,
        gt: &Pose,
        model_points: &[Point3D],
        group: &SymmetryGroup,
    ) -> Result<bool, MetricsError> {
        Ok(match *self {
            Metric::Add { threshold_mm } => {
                sym_add_error(est, gt, model_points, group)? <= threshold_mm
            }
            Metric::PoseTolerance { trans_mm, rot_deg } => {
                pose_within(est, gt, group, trans_mm, rot_deg)
            }
        })
    }
}

/// One-to-one estimate/ground-truth assignment for a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAssignment {
    /// Per ground-truth instance, the index of the matched estimate.
    pub matched: Vec<Option<usize>>,
    /// Estimates left without a ground-truth instance.
    pub false_detections: usize,
}

/// Pairs estimates with ground-truth poses greedily by ascending
/// symmetry-aware ADD; each side is claimed at most once. Ties break on
/// (estimate, truth) index order, so the result is deterministic.
pub fn assign_estimates(
    estimates: &[Pose],
    truths: &[Pose],
    model_points: &[Point3D],
    group: &SymmetryGroup,
) -> Result<SceneAssignment, MetricsError> {
    let mut edges = Vec::with_capacity(estimates.len() * truths.len());
    for (e, est) in estimates.iter().enumerate() {
        for (t, gt) in truths.iter().enumerate() {
            edges.push((sym_add_error(est, gt, model_points, group)?, e, t));
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut matched = vec![None; truths.len()];
    let mut estimate_used = vec![false; estimates.len()];
    for (_, e, t) in edges {
        if !estimate_used[e] && matched[t].is_none() {
            estimate_used[e] = true;
            matched[t] = Some(e);
        }
    }
    let false_detections = estimate_used.iter().filter(|u| !**u).count();
    Ok(SceneAssignment { matched, false_detections })
}

/// One ground-truth instance with its matched estimate, if any.
#[derive(Debug, Clone)]
pub struct RecallItem {
    pub estimate: Option<Pose>,
    pub truth: Pose,
    /// Peak fraction of keypoints visible in any single view.
    pub visibility: f64,
}

/// Percentage of sufficiently visible ground-truth instances whose
/// matched estimate passes the metric. Instances at or below 75%
/// visibility stay out of the denominator; an empty denominator counts as
/// vacuously perfect.
pub fn average_recall(
    items: &[RecallItem],
    model_points: &[Point3D],
    group: &SymmetryGroup,
    metric: Metric,
) -> Result<f64, MetricsError> {
    let mut evaluable = 0usize;
    let mut recalled = 0usize;
    for item in items {
        if item.visibility <= 0.75 {
            continue;
        }
        evaluable += 1;
        if let Some(est) = &item.estimate {
            if metric.passes(est, &item.truth, model_points, group)? {
                recalled += 1;
            }
        }
    }
    if evaluable == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * recalled as f64 / evaluable as f64)
}
