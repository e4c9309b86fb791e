//! Multi-view 6D object pose estimation from dense keypoint observations.
//!
//! The pipeline takes per-view instance detections (2D keypoints with
//! visibility codes), associates detections of the same physical object
//! across views using epipolar geometry, reconstructs the visible keypoints
//! in 3D, and solves for the object pose in three stages: robust
//! triangulation, rigid alignment against the keypoint model, and nonlinear
//! reprojection refinement. Symmetric objects are handled through proper
//! rotation symmetry groups, both when canonicalizing rotations and when
//! scoring estimates.
//!
//! All randomized components draw from explicitly seeded generators and are
//! bit-reproducible for a fixed seed, independent of thread count.

pub mod attention;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod pose;
pub mod rng;
pub mod scene;
pub mod simulator;
pub mod solver;
pub mod symmetry;

pub use geometry::{CameraView, GeometryError, Pixel2D, Point3D};
pub use matching::{InstanceAssociation, InstanceObservation, MatchError, MatchingConfig};
pub use metrics::{Metric, MetricsError};
pub use pipeline::{PipelineConfig, SceneResult};
pub use pose::Pose;
pub use simulator::{KeypointModel, Scene, SceneConfig, SimulatorError};
pub use solver::{PoseEstimate, SolveStage, SolverConfig, SolverError, StageTag, StagedError};
pub use symmetry::SymmetryGroup;
