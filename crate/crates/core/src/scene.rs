//! On-disk schemas for scene batches and estimation results.
//!
//! Files are JSON with a `schema_version` gate and an embedded config
//! hash plus seed, so every artifact names the configuration that
//! produced it. Serialization is deterministic: field order is fixed by
//! the record structs and floating-point values round-trip exactly, so
//! identical inputs produce byte-identical files. Timings are
//! deliberately absent; they belong in sidecar files that make no
//! reproducibility claims.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, Pixel2D, Point3D};
use crate::matching::InstanceObservation;
use crate::pose::Pose;
use crate::simulator::{KeypointModel, Scene};
use crate::solver::{PoseEstimate, StageTag, StagedError};
use crate::symmetry::SymmetryGroup;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema version {got}, this build reads {expected}")]
    SchemaMismatch { got: u32, expected: u32 },
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
}

fn mat3_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn mat3_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| v[3 * r + c])
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            rotation: mat3_row_major(&pose.rotation),
            translation: pose.translation.into(),
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(mat3_from_row_major(&self.rotation), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub image_size: [u32; 2],
}

impl CameraRecord {
    pub fn from_view(view: &CameraView) -> Self {
        Self {
            intrinsics: mat3_row_major(&view.intrinsics),
            rotation: mat3_row_major(&view.rotation),
            translation: view.translation.into(),
            image_size: view.image_size,
        }
    }

    pub fn to_view(&self) -> Result<CameraView, SceneError> {
        CameraView::new(
            mat3_from_row_major(&self.intrinsics),
            mat3_from_row_major(&self.rotation),
            Vector3::from(self.translation),
            self.image_size,
        )
        .map_err(|_| SceneError::InvalidRecord("camera record fails validation"))
    }
}

/// One detected instance in one view: dense keypoints and visibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl ObservationRecord {
    pub fn from_observation(obs: &InstanceObservation) -> Self {
        Self {
            keypoints: obs.keypoints.iter().map(|p| [p.u, p.v]).collect(),
            visibility: obs.visibility.clone(),
        }
    }

    pub fn to_observation(&self, view_index: usize) -> Result<InstanceObservation, SceneError> {
        if self.keypoints.len() != self.visibility.len() {
            return Err(SceneError::InvalidRecord("keypoint/visibility length mismatch"));
        }
        Ok(InstanceObservation::new(
            self.keypoints.iter().map(|&[u, v]| Pixel2D::new(u, v)).collect(),
            self.visibility.clone(),
            view_index,
            None,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub poses: Vec<PoseRecord>,
    pub canonical_poses: Vec<PoseRecord>,
    /// Peak single-view visible fraction per instance.
    pub peak_visibility: Vec<f64>,
    pub slot_of_instance: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub diameter_mm: f64,
    pub model_points: Vec<[f64; 3]>,
    pub keypoints: Vec<[f64; 3]>,
    /// Proper rotation symmetry elements, row-major.
    pub symmetry: Vec<[f64; 9]>,
}

impl ModelRecord {
    pub fn from_model(model: &KeypointModel) -> Self {
        Self {
            name: model.name.clone(),
            diameter_mm: model.diameter,
            model_points: model.model_points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            keypoints: model.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            symmetry: model.symmetry.elements().iter().map(mat3_row_major).collect(),
        }
    }

    pub fn keypoints_vec(&self) -> Vec<Point3D> {
        self.keypoints.iter().map(|&[x, y, z]| Vector3::new(x, y, z)).collect()
    }

    pub fn model_points_vec(&self) -> Vec<Point3D> {
        self.model_points.iter().map(|&[x, y, z]| Vector3::new(x, y, z)).collect()
    }

    pub fn symmetry_group(&self) -> Result<SymmetryGroup, SceneError> {
        let elements: Vec<Matrix3<f64>> =
            self.symmetry.iter().map(mat3_from_row_major).collect();
        SymmetryGroup::from_elements(elements)
            .map_err(|_| SceneError::InvalidRecord("symmetry elements do not form a group"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: usize,
    pub seed: u64,
    pub cameras: Vec<CameraRecord>,
    /// Per view, per slot.
    pub observations: Vec<Vec<ObservationRecord>>,
    pub truth: TruthRecord,
}

impl SceneRecord {
    pub fn from_scene(scene_id: usize, seed: u64, scene: &Scene) -> Self {
        let instance_count = scene.truth.poses.len();
        Self {
            scene_id,
            seed,
            cameras: scene.views.iter().map(CameraRecord::from_view).collect(),
            observations: scene
                .observations
                .iter()
                .map(|slots| slots.iter().map(ObservationRecord::from_observation).collect())
                .collect(),
            truth: TruthRecord {
                poses: scene.truth.poses.iter().map(PoseRecord::from_pose).collect(),
                canonical_poses: scene
                    .truth
                    .canonical_poses
                    .iter()
                    .map(PoseRecord::from_pose)
                    .collect(),
                peak_visibility: (0..instance_count)
                    .map(|i| scene.truth.peak_visibility(i))
                    .collect(),
                slot_of_instance: scene.truth.slot_of_instance.clone(),
            },
        }
    }

    pub fn views(&self) -> Result<Vec<CameraView>, SceneError> {
        self.cameras.iter().map(CameraRecord::to_view).collect()
    }

    pub fn observations(&self) -> Result<Vec<Vec<InstanceObservation>>, SceneError> {
        self.observations
            .iter()
            .enumerate()
            .map(|(v, slots)| slots.iter().map(|o| o.to_observation(v)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitsRecord {
    pub translation: String,
    pub pixel: String,
}

impl Default for UnitsRecord {
    fn default() -> Self {
        Self { translation: "mm".into(), pixel: "px".into() }
    }
}

/// A batch of scenes sharing one generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub units: UnitsRecord,
    pub model: ModelRecord,
    pub scenes: Vec<SceneRecord>,
}

/// One association's solve outcome in serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceResultRecord {
    pub attached_views: Vec<usize>,
    /// "ok" or the error display.
    pub status: String,
    pub pose: Option<PoseRecord>,
    pub stage: Option<String>,
    pub inlier_count_3d: Option<usize>,
    pub robust_cost: Option<f64>,
    pub per_view_residual_px: Vec<Option<f64>>,
}

impl InstanceResultRecord {
    pub fn from_outcome(
        attached_views: Vec<usize>,
        outcome: &Result<PoseEstimate, StagedError>,
    ) -> Self {
        match outcome {
            Ok(est) => Self {
                attached_views,
                status: "ok".into(),
                pose: Some(PoseRecord::from_pose(&est.pose)),
                stage: Some(
                    match est.stage {
                        StageTag::Aligned => "aligned",
                        StageTag::Refined => "refined",
                    }
                    .into(),
                ),
                inlier_count_3d: Some(est.inlier_count_3d),
                robust_cost: est.robust_cost,
                per_view_residual_px: est.per_view_residual_px.clone(),
            },
            Err(e) => Self {
                attached_views,
                status: e.to_string(),
                pose: None,
                stage: None,
                inlier_count_3d: None,
                robust_cost: None,
                per_view_residual_px: Vec::new(),
            },
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneResultRecord {
    pub scene_id: usize,
    pub instances: Vec<InstanceResultRecord>,
}

/// Estimation output for a scene batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    /// Hash of the solver configuration that ran.
    pub config_hash: String,
    /// Hash copied from the scene file, tying results to their input.
    pub scene_config_hash: String,
    pub seed: u64,
    pub scenes: Vec<SceneResultRecord>,
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SceneError> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_scene_file(path: &Path, file: &SceneFile) -> Result<(), SceneError> {
    save_json(path, file)
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile, SceneError> {
    let file: SceneFile = load_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(SceneError::SchemaMismatch {
            got: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(file)
}

pub fn save_results_file(path: &Path, file: &ResultsFile) -> Result<(), SceneError> {
    save_json(path, file)
}

pub fn load_results_file(path: &Path) -> Result<ResultsFile, SceneError> {
    let file: ResultsFile = load_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(SceneError::SchemaMismatch {
            got: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(file)
}
