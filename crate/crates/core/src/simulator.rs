//! Deterministic synthetic scene generation.
//!
//! Stands in for a trained dense-keypoint network: given an object model
//! and a camera rig, it emits per-view keypoint observations with
//! configurable Gaussian noise, confident-but-wrong outliers and random
//! occlusion, together with complete ground truth for evaluation.
//!
//! Determinism contract: every random quantity comes from a ChaCha stream
//! derived from the scene seed. Instance poses draw from one stream and
//! each view's observations from its own, so regenerating with a higher
//! view count reuses identical poses and per-view observations. Normal
//! deviates use the Box-Muller transform (see [`crate::rng::normal_pair`])
//! and are never platform-dependent.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{project, CameraView, Pixel2D, Point3D};
use crate::matching::InstanceObservation;
use crate::pose::{random_rotation, rotation_about, Pose};
use crate::rng::{normal_pair, stream_rng};
use crate::symmetry::{canonical_equivalent_pose, SymmetryGroup};

const POSE_STREAM: u64 = 1;
const VIEW_STREAM_BASE: u64 = 2;
/// Attempts to place all instances before giving up on a crowded config.
const MAX_PLACEMENT_ATTEMPTS: u32 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(&'static str),
    #[error("farthest point sampling needs {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("could not place {instances} instances after {attempts} attempts")]
    PlacementFailed { instances: usize, attempts: u32 },
    #[error("invalid keypoint model: {0}")]
    ModelInvalid(&'static str),
}

/// Start rule for farthest point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsStart {
    /// Deterministic default: the point farthest from the centroid.
    FarthestFromCentroid,
    /// Fixed index, mostly for tests.
    Index(usize),
}

/// Greedy max-min subset selection. Each added point maximizes the minimum
/// distance to the already selected set; distance ties resolve to the
/// smaller index.
pub fn fps_sample(
    points: &[Point3D],
    n: usize,
    start: FpsStart,
) -> Result<Vec<Point3D>, SimulatorError> {
    if points.len() < n || n == 0 {
        return Err(SimulatorError::TooFewPoints { needed: n.max(1), got: points.len() });
    }
    let first = match start {
        FpsStart::Index(i) => {
            if i >= points.len() {
                return Err(SimulatorError::ConfigInvalid("fps start index out of range"));
            }
            i
        }
        FpsStart::FarthestFromCentroid => {
            let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, p) in points.iter().enumerate() {
                let d = (p - centroid).norm_squared();
                if d > best.0 {
                    best = (d, i);
                }
            }
            best.1
        }
    };

    let mut selected = vec![first];
    // min_dist[j] = distance from point j to the selected set.
    let mut min_dist: Vec<f64> =
        points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while selected.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, d) in min_dist.iter().enumerate() {
            if selected.contains(&j) {
                continue;
            }
            if *d > best.0 {
                best = (*d, j);
            }
        }
        let chosen = best.1;
        selected.push(chosen);
        for (j, d) in min_dist.iter_mut().enumerate() {
            let dist = (points[j] - points[chosen]).norm_squared();
            if dist < *d {
                *d = dist;
            }
        }
    }
    Ok(selected.into_iter().map(|i| points[i]).collect())
}

/// Object model: a dense point set, the keypoint subset the network would
/// predict, the object's proper symmetry group and its diameter.
#[derive(Debug, Clone)]
pub struct KeypointModel {
    pub name: String,
    pub model_points: Vec<Point3D>,
    pub keypoints: Vec<Point3D>,
    pub symmetry: SymmetryGroup,
    /// Max pairwise distance over model_points (mm).
    pub diameter: f64,
}

impl KeypointModel {
    /// Builds a model whose keypoints are FPS-sampled from the point set.
    pub fn new(
        name: &str,
        model_points: Vec<Point3D>,
        keypoint_count: usize,
        symmetry: SymmetryGroup,
    ) -> Result<Self, SimulatorError> {
        let keypoints =
            fps_sample(&model_points, keypoint_count, FpsStart::FarthestFromCentroid)?;
        Self::with_keypoints(name, model_points, keypoints, symmetry)
    }

    /// Builds a model with an explicit keypoint set (used where keypoints
    /// must carry structure FPS would destroy, e.g. symmetry orbits).
    pub fn with_keypoints(
        name: &str,
        model_points: Vec<Point3D>,
        keypoints: Vec<Point3D>,
        symmetry: SymmetryGroup,
    ) -> Result<Self, SimulatorError> {
        if keypoints.len() < 4 {
            return Err(SimulatorError::ModelInvalid("need at least 4 keypoints"));
        }
        let mut diameter = 0.0f64;
        for (i, p) in model_points.iter().enumerate() {
            for q in &model_points[i + 1..] {
                diameter = diameter.max((p - q).norm());
            }
        }
        if diameter <= 0.0 {
            return Err(SimulatorError::ModelInvalid("degenerate point set"));
        }
        Ok(Self { name: name.to_string(), model_points, keypoints, symmetry, diameter })
    }
}

/// Box surface grid; trivial symmetry unless the caller attaches one.
pub fn box_model(
    name: &str,
    half_extents: [f64; 3],
    per_face: usize,
    keypoint_count: usize,
) -> Result<KeypointModel, SimulatorError> {
    let [hx, hy, hz] = half_extents;
    if hx <= 0.0 || hy <= 0.0 || hz <= 0.0 || per_face < 2 {
        return Err(SimulatorError::ModelInvalid("box needs positive extents, per_face >= 2"));
    }
    let mut points = Vec::new();
    let steps = |h: f64| -> Vec<f64> {
        (0..per_face).map(|i| -h + 2.0 * h * i as f64 / (per_face - 1) as f64).collect()
    };
    for &x in &steps(hx) {
        for &y in &steps(hy) {
            points.push(Vector3::new(x, y, hz));
            points.push(Vector3::new(x, y, -hz));
        }
    }
    for &x in &steps(hx) {
        for &z in &steps(hz) {
            points.push(Vector3::new(x, hy, z));
            points.push(Vector3::new(x, -hy, z));
        }
    }
    for &y in &steps(hy) {
        for &z in &steps(hz) {
            points.push(Vector3::new(hx, y, z));
            points.push(Vector3::new(-hx, y, z));
        }
    }
    points.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    KeypointModel::new(name, points, keypoint_count, SymmetryGroup::trivial())
}

/// Cylinder surface: lateral grid plus cap rings plus axis poles. The
/// angular grid has `segments` columns, so the point set is exactly
/// invariant under the cyclic group of the same order about z; the model
/// carries that group.
pub fn cylinder_model(
    name: &str,
    radius: f64,
    half_height: f64,
    segments: usize,
    rows: usize,
    keypoint_count: usize,
) -> Result<KeypointModel, SimulatorError> {
    if radius <= 0.0 || half_height <= 0.0 || segments < 2 || rows < 2 {
        return Err(SimulatorError::ModelInvalid("cylinder needs radius, height, segments >= 2"));
    }
    let mut points = Vec::new();
    for s in 0..segments {
        let a = s as f64 * std::f64::consts::TAU / segments as f64;
        let (sin, cos) = a.sin_cos();
        for r in 0..rows {
            let z = -half_height + 2.0 * half_height * r as f64 / (rows - 1) as f64;
            points.push(Vector3::new(radius * cos, radius * sin, z));
        }
        // Cap rings at half radius.
        points.push(Vector3::new(0.5 * radius * cos, 0.5 * radius * sin, half_height));
        points.push(Vector3::new(0.5 * radius * cos, 0.5 * radius * sin, -half_height));
    }
    points.push(Vector3::new(0.0, 0.0, half_height));
    points.push(Vector3::new(0.0, 0.0, -half_height));
    let symmetry = SymmetryGroup::cyclic(&Vector3::z(), segments)
        .expect("cyclic group about z is well-formed");
    KeypointModel::new(name, points, keypoint_count, symmetry)
}

/// Model whose keypoint set is a union of symmetry orbits: seeds expanded
/// by every group element. The keypoint set is setwise invariant under the
/// group, which symmetry-aware metrics rely on.
pub fn orbit_model(
    name: &str,
    seeds: &[Point3D],
    group: SymmetryGroup,
) -> Result<KeypointModel, SimulatorError> {
    let mut points = Vec::new();
    for s in seeds {
        for g in group.elements() {
            points.push(g * s);
        }
    }
    KeypointModel::with_keypoints(name, points.clone(), points, group)
}

/// Scene generation knobs. Lengths in mm, angles in degrees, image
/// quantities in px.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub view_count: usize,
    pub ring_radius_mm: f64,
    pub elevation_deg: f64,
    pub image_size: [u32; 2],
    pub focal_px: f64,
    pub instance_count: usize,
    /// Instance centers sampled uniformly in ±extent around the rig target.
    pub translation_extent_mm: [f64; 3],
    pub noise_sigma_px: f64,
    pub outlier_ratio: f64,
    pub occlusion_prob: f64,
    /// Emit observations rendered from the canonicalized pose instead of
    /// the raw one (consistent labels for symmetric objects).
    pub canonical_labels: bool,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            view_count: 4,
            ring_radius_mm: 600.0,
            elevation_deg: 30.0,
            image_size: [1280, 1024],
            focal_px: 1000.0,
            instance_count: 1,
            translation_extent_mm: [80.0, 80.0, 40.0],
            noise_sigma_px: 0.0,
            outlier_ratio: 0.0,
            occlusion_prob: 0.0,
            canonical_labels: false,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.view_count < 2 {
            return Err(SimulatorError::ConfigInvalid("need at least 2 views"));
        }
        if self.ring_radius_mm <= 0.0 || self.focal_px <= 0.0 {
            return Err(SimulatorError::ConfigInvalid("radius and focal must be positive"));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(SimulatorError::ConfigInvalid("empty image"));
        }
        if self.instance_count == 0 {
            return Err(SimulatorError::ConfigInvalid("need at least 1 instance"));
        }
        if !(0.0..=1.0).contains(&self.outlier_ratio)
            || !(0.0..=1.0).contains(&self.occlusion_prob)
        {
            return Err(SimulatorError::ConfigInvalid("ratios must lie in [0,1]"));
        }
        if self.noise_sigma_px < 0.0 {
            return Err(SimulatorError::ConfigInvalid("noise sigma must be nonnegative"));
        }
        if self.translation_extent_mm.iter().any(|e| *e < 0.0) {
            return Err(SimulatorError::ConfigInvalid("translation extent must be nonnegative"));
        }
        Ok(())
    }
}

/// Ground truth accompanying a generated scene. All masks are indexed
/// [view][instance][keypoint] with instances in truth-label order.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    /// Raw sampled poses, world frame (first camera).
    pub poses: Vec<Pose>,
    /// Symmetry-canonicalized equivalents of `poses`.
    pub canonical_poses: Vec<Pose>,
    /// Noise-free projections; None where the keypoint fell behind the
    /// camera.
    pub projections: Vec<Vec<Vec<Option<Pixel2D>>>>,
    pub visibility: Vec<Vec<Vec<bool>>>,
    pub outlier_mask: Vec<Vec<Vec<bool>>>,
    /// Observation slot of each instance per view; None where the instance
    /// produced no visible keypoint and thus no observation.
    pub slot_of_instance: Vec<Vec<Option<usize>>>,
}

impl SceneTruth {
    /// Fraction of keypoints visible for one instance in one view.
    pub fn visible_fraction(&self, view: usize, instance: usize) -> f64 {
        let v = &self.visibility[view][instance];
        v.iter().filter(|b| **b).count() as f64 / v.len() as f64
    }

    /// Best single-view visible fraction of an instance.
    pub fn peak_visibility(&self, instance: usize) -> f64 {
        (0..self.visibility.len())
            .map(|v| self.visible_fraction(v, instance))
            .fold(0.0, f64::max)
    }
}

/// A generated scene: calibrated views, per-view observation slots in
/// shuffled order, and full truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<CameraView>,
    pub observations: Vec<Vec<InstanceObservation>>,
    pub truth: SceneTruth,
}

/// Cameras on a ring of the given radius and elevation, all looking at the
/// rig target, re-expressed so that view 0 is the world frame (identity
/// extrinsics).
pub fn ring_rig(config: &SceneConfig) -> Result<Vec<CameraView>, SimulatorError> {
    config.validate()?;
    let scene_frame: Vec<CameraView> =
        (0..config.view_count).map(|j| scene_frame_camera(config, j)).collect();

    // Re-express in the first camera's frame: x_cam_j = R'_j x_w + t'_j
    // with x_w the coordinates in camera 0.
    let r0 = scene_frame[0].rotation;
    let t0 = scene_frame[0].translation;
    let k = scene_frame[0].intrinsics;
    let views = scene_frame
        .iter()
        .enumerate()
        .map(|(j, cam)| {
            let (rot, tr) = if j == 0 {
                (Matrix3::identity(), Vector3::zeros())
            } else {
                let rel = cam.rotation * r0.transpose();
                (rel, cam.translation - rel * t0)
            };
            CameraView::new(k, rot, tr, config.image_size).expect("re-expressed rig stays valid")
        })
        .collect();
    Ok(views)
}

/// Camera j of the rig in the original scene frame (origin at the target).
fn scene_frame_camera(config: &SceneConfig, j: usize) -> CameraView {
    let k = Matrix3::new(
        config.focal_px,
        0.0,
        config.image_size[0] as f64 / 2.0,
        0.0,
        config.focal_px,
        config.image_size[1] as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let height = config.ring_radius_mm * config.elevation_deg.to_radians().tan();
    let az = j as f64 * std::f64::consts::TAU / config.view_count as f64;
    CameraView::look_at(
        k,
        Vector3::new(config.ring_radius_mm * az.cos(), config.ring_radius_mm * az.sin(), height),
        Vector3::zeros(),
        Vector3::z(),
        config.image_size,
    )
    .expect("ring cameras are well-formed")
}

/// The world-frame coordinates of the rig target (scene-frame origin),
/// which is where instance translations are sampled around.
pub fn rig_target(config: &SceneConfig) -> Result<Point3D, SimulatorError> {
    config.validate()?;
    // The scene origin maps to t_0 in camera-0 coordinates.
    Ok(scene_frame_camera(config, 0).translation)
}

/// Samples instance poses in the scene frame and returns them re-expressed
/// in the world (first camera) frame. Rejection keeps instance centers at
/// least half a diameter apart.
fn sample_poses(
    config: &SceneConfig,
    model: &KeypointModel,
    rng: &mut impl Rng,
    scene_to_world: &Pose,
) -> Result<Vec<Pose>, SimulatorError> {
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(config.instance_count);
    let mut poses = Vec::with_capacity(config.instance_count);
    let mut attempts = 0;
    while poses.len() < config.instance_count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SimulatorError::PlacementFailed {
                instances: config.instance_count,
                attempts,
            });
        }
        let rot = random_rotation(rng);
        let [ex, ey, ez] = config.translation_extent_mm;
        let center = Vector3::new(
            if ex > 0.0 { rng.random_range(-ex..ex) } else { 0.0 },
            if ey > 0.0 { rng.random_range(-ey..ey) } else { 0.0 },
            if ez > 0.0 { rng.random_range(-ez..ez) } else { 0.0 },
        );
        if centers.iter().any(|c| (c - center).norm() < 0.5 * model.diameter) {
            continue;
        }
        centers.push(center);
        poses.push(Pose::new(
            scene_to_world.rotation * rot,
            scene_to_world.rotation * center + scene_to_world.translation,
        ));
    }
    Ok(poses)
}

/// Generates one scene. See the module docs for the randomness layout.
pub fn generate_scene(
    config: &SceneConfig,
    model: &KeypointModel,
) -> Result<Scene, SimulatorError> {
    config.validate()?;
    let views = ring_rig(config)?;

    // The scene frame (ring center) expressed in the world frame equals
    // camera 0's extrinsics of the original rig.
    let cam0 = scene_frame_camera(config, 0);
    let scene_to_world = Pose::new(cam0.rotation, cam0.translation);

    let mut pose_rng = stream_rng(config.rng_seed, POSE_STREAM);
    let poses = sample_poses(config, model, &mut pose_rng, &scene_to_world)?;
    let canonical_poses: Vec<Pose> =
        poses.iter().map(|p| canonical_equivalent_pose(p, &model.symmetry)).collect();
    let render_poses = if config.canonical_labels { &canonical_poses } else { &poses };

    let n_kp = model.keypoints.len();
    let mut observations = Vec::with_capacity(config.view_count);
    let mut projections = Vec::with_capacity(config.view_count);
    let mut visibility = Vec::with_capacity(config.view_count);
    let mut outlier_mask = Vec::with_capacity(config.view_count);
    let mut slot_of_instance = Vec::with_capacity(config.view_count);

    for (v, view) in views.iter().enumerate() {
        let mut rng = stream_rng(config.rng_seed, VIEW_STREAM_BASE + v as u64);
        let mut view_proj = Vec::with_capacity(config.instance_count);
        let mut view_vis = Vec::with_capacity(config.instance_count);
        let mut view_out = Vec::with_capacity(config.instance_count);
        let mut slots = Vec::new();

        for (label, pose) in render_poses.iter().enumerate() {
            let mut proj = Vec::with_capacity(n_kp);
            let mut vis = Vec::with_capacity(n_kp);
            let mut outs = Vec::with_capacity(n_kp);
            let mut pixels = Vec::with_capacity(n_kp);
            for kp in &model.keypoints {
                let true_px = project(view, pose, kp).ok();
                let in_image = true_px.as_ref().is_some_and(|p| view.contains(p));
                let visible = in_image && rng.random::<f64>() >= config.occlusion_prob;
                let mut outlier = false;
                let observed = if visible {
                    if config.outlier_ratio > 0.0 && rng.random::<f64>() < config.outlier_ratio {
                        outlier = true;
                        Pixel2D::new(
                            rng.random_range(0.0..config.image_size[0] as f64),
                            rng.random_range(0.0..config.image_size[1] as f64),
                        )
                    } else {
                        let base = true_px.expect("visible implies projected");
                        if config.noise_sigma_px > 0.0 {
                            let (n0, n1) = normal_pair(&mut rng);
                            Pixel2D::new(
                                base.u + config.noise_sigma_px * n0,
                                base.v + config.noise_sigma_px * n1,
                            )
                        } else {
                            base
                        }
                    }
                } else {
                    Pixel2D::new(0.0, 0.0)
                };
                proj.push(true_px);
                vis.push(visible);
                outs.push(outlier);
                pixels.push(observed);
            }
            if vis.iter().any(|b| *b) {
                slots.push(InstanceObservation::new(pixels, vis.clone(), v, Some(label)));
            }
            view_proj.push(proj);
            view_vis.push(vis);
            view_out.push(outs);
        }

        slots.shuffle(&mut rng);
        let mut view_slots = vec![None; config.instance_count];
        for (slot, obs) in slots.iter().enumerate() {
            view_slots[obs.truth_label.expect("simulator sets labels")] = Some(slot);
        }
        observations.push(slots);
        projections.push(view_proj);
        visibility.push(view_vis);
        outlier_mask.push(view_out);
        slot_of_instance.push(view_slots);
    }

    Ok(Scene {
        views,
        observations,
        truth: SceneTruth {
            poses,
            canonical_poses,
            projections,
            visibility,
            outlier_mask,
            slot_of_instance,
        },
    })
}

/// A cylinder rotated into general position, useful wherever tests want a
/// nontrivial symmetric object.
pub fn demo_cylinder() -> KeypointModel {
    cylinder_model("cylinder-c8", 30.0, 45.0, 8, 6, 64).expect("static model is valid")
}

/// An asymmetric box with enough surface points for dense sampling.
pub fn demo_box(keypoints: usize) -> KeypointModel {
    box_model("box", [25.0, 18.0, 12.0], 9, keypoints).expect("static model is valid")
}

/// Rotation by `angle` about z, handy in tests.
pub fn z_rotation(angle: f64) -> Matrix3<f64> {
    rotation_about(&Vector3::z(), angle)
}
