//! Experiment configuration: a TOML file with `[simulator]`, `[solver]`,
//! `[matching]` and `[metrics]` sections, all optional, all fields
//! defaulted. Command-line flags override individual fields after
//! parsing; the hash embedded in output files is taken over the
//! effective config, so an override changes the hash exactly like an
//! edit to the file would.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mvpose_core::matching::MatchingConfig;
use mvpose_core::metrics::Metric;
use mvpose_core::simulator::{box_model, cylinder_model, KeypointModel, SceneConfig};
use mvpose_core::solver::SolverConfig;

use crate::CliError;

/// `[simulator]` section: scene generation knobs plus the object model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    /// Object model: "box" (asymmetric) or "cylinder" (8-fold symmetric).
    pub model: String,
    pub keypoints: usize,
    pub scene_count: usize,
    pub view_count: usize,
    pub instance_count: usize,
    pub ring_radius_mm: f64,
    pub elevation_deg: f64,
    pub image_size: [u32; 2],
    pub focal_px: f64,
    pub translation_extent_mm: [f64; 3],
    pub noise_sigma_px: f64,
    pub outlier_ratio: f64,
    pub occlusion_prob: f64,
    pub canonical_labels: bool,
    pub seed: u64,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        let base = SceneConfig::default();
        Self {
            model: "box".into(),
            keypoints: 128,
            scene_count: 1,
            view_count: base.view_count,
            instance_count: base.instance_count,
            ring_radius_mm: base.ring_radius_mm,
            elevation_deg: base.elevation_deg,
            image_size: base.image_size,
            focal_px: base.focal_px,
            translation_extent_mm: base.translation_extent_mm,
            noise_sigma_px: base.noise_sigma_px,
            outlier_ratio: base.outlier_ratio,
            occlusion_prob: base.occlusion_prob,
            canonical_labels: base.canonical_labels,
            seed: 0,
        }
    }
}

impl SimulatorSection {
    /// Scene config for one scene; the per-scene seed is filled by the
    /// caller.
    pub fn scene_config(&self, rng_seed: u64) -> SceneConfig {
        SceneConfig {
            view_count: self.view_count,
            ring_radius_mm: self.ring_radius_mm,
            elevation_deg: self.elevation_deg,
            image_size: self.image_size,
            focal_px: self.focal_px,
            instance_count: self.instance_count,
            translation_extent_mm: self.translation_extent_mm,
            noise_sigma_px: self.noise_sigma_px,
            outlier_ratio: self.outlier_ratio,
            occlusion_prob: self.occlusion_prob,
            canonical_labels: self.canonical_labels,
            rng_seed,
        }
    }

    /// Builds the configured object model, scaling surface sampling
    /// density so there are enough distinct points for the requested
    /// keypoint count.
    pub fn build_model(&self) -> Result<KeypointModel, CliError> {
        let n = self.keypoints;
        match self.model.as_str() {
            "box" => {
                // 6 faces of per_face^2 points each; +3 margin absorbs
                // the shared-edge points dedup removes.
                let per_face = (((n as f64 / 6.0).sqrt().ceil() as usize) + 3).max(9);
                box_model("box", [25.0, 18.0, 12.0], per_face, n)
            }
            "cylinder" => {
                // 8 angular segments fix the C8 symmetry; rows grow with
                // the keypoint budget (plus 2 cap points per segment and
                // 2 poles).
                let rows = (n.saturating_sub(18).div_ceil(8) + 1).max(6);
                cylinder_model("cylinder-c8", 30.0, 45.0, 8, rows, n)
            }
            other => {
                return Err(CliError::Config(format!(
                    "simulator.model: unknown model \"{other}\" (expected \"box\" or \"cylinder\")"
                )))
            }
        }
        .map_err(|e| CliError::Config(format!("simulator model construction failed: {e}")))
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |field: &str, why: &str| {
            Err(CliError::Config(format!("simulator.{field}: {why}")))
        };
        if self.view_count < 2 {
            return fail("view_count", "need at least 2 views");
        }
        if self.keypoints < 4 {
            return fail("keypoints", "need at least 4 keypoints");
        }
        if self.scene_count == 0 {
            return fail("scene_count", "need at least 1 scene");
        }
        if self.instance_count == 0 {
            return fail("instance_count", "need at least 1 instance");
        }
        if self.ring_radius_mm <= 0.0 {
            return fail("ring_radius_mm", "must be positive");
        }
        if self.focal_px <= 0.0 {
            return fail("focal_px", "must be positive");
        }
        if self.image_size.iter().any(|&s| s == 0) {
            return fail("image_size", "must be nonzero");
        }
        if self.noise_sigma_px < 0.0 {
            return fail("noise_sigma_px", "must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.outlier_ratio) {
            return fail("outlier_ratio", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob", "must lie in [0, 1]");
        }
        if self.translation_extent_mm.iter().any(|&e| e < 0.0) {
            return fail("translation_extent_mm", "must be nonnegative");
        }
        self.build_model().map(|_| ())
    }
}

/// `[solver]` section, mirroring the library's solver knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub stage1_inlier_px: f64,
    pub stage2_inlier_mm: f64,
    pub stage1_iterations: u32,
    pub stage2_iterations: u32,
    pub huber_width_px: f64,
    pub refine: bool,
    pub refine_max_iters: u32,
    pub seed: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let base = SolverConfig::default();
        Self {
            stage1_inlier_px: base.stage1_inlier_px,
            stage2_inlier_mm: base.stage2_inlier_mm,
            stage1_iterations: base.stage1_iterations,
            stage2_iterations: base.stage2_iterations,
            huber_width_px: base.huber_width_px,
            refine: base.refine,
            refine_max_iters: base.refine_max_iters,
            seed: 0,
        }
    }
}

impl SolverSection {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            stage1_inlier_px: self.stage1_inlier_px,
            stage2_inlier_mm: self.stage2_inlier_mm,
            stage1_iterations: self.stage1_iterations,
            stage2_iterations: self.stage2_iterations,
            huber_width_px: self.huber_width_px,
            refine: self.refine,
            refine_max_iters: self.refine_max_iters,
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |field: &str, why: &str| {
            Err(CliError::Config(format!("solver.{field}: {why}")))
        };
        if self.stage1_inlier_px <= 0.0 {
            return fail("stage1_inlier_px", "must be positive");
        }
        if self.stage2_inlier_mm <= 0.0 {
            return fail("stage2_inlier_mm", "must be positive");
        }
        if self.stage1_iterations == 0 {
            return fail("stage1_iterations", "must be positive");
        }
        if self.stage2_iterations == 0 {
            return fail("stage2_iterations", "must be positive");
        }
        if self.huber_width_px <= 0.0 {
            return fail("huber_width_px", "must be positive");
        }
        Ok(())
    }
}

/// `[matching]` section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    pub propagate_threshold_px: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        Self { propagate_threshold_px: MatchingConfig::default().propagate_threshold_px }
    }
}

impl MatchingSection {
    pub fn matching_config(&self) -> MatchingConfig {
        MatchingConfig { propagate_threshold_px: self.propagate_threshold_px }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.propagate_threshold_px <= 0.0 {
            return Err(CliError::Config(
                "matching.propagate_threshold_px: must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `[metrics]` section: which success criteria the evaluation report
/// scores, and the ADD threshold as a fraction of model diameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub metrics: Vec<String>,
    pub add_threshold_factor: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            metrics: vec!["add".into(), "5mm10deg".into(), "2mm3deg".into()],
            add_threshold_factor: 0.1,
        }
    }
}

impl MetricsSection {
    fn validate(&self) -> Result<(), CliError> {
        if self.metrics.is_empty() {
            return Err(CliError::Config("metrics.metrics: need at least one metric".into()));
        }
        for name in &self.metrics {
            parse_metric_name(name)?;
        }
        if self.add_threshold_factor <= 0.0 {
            return Err(CliError::Config(
                "metrics.add_threshold_factor: must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Resolves a metric name against a model diameter. `add` thresholds at
/// `factor * diameter` mm.
pub fn resolve_metric(name: &str, diameter_mm: f64, factor: f64) -> Result<Metric, CliError> {
    parse_metric_name(name)?;
    Ok(match name {
        "add" => Metric::Add { threshold_mm: factor * diameter_mm },
        "5mm10deg" => Metric::standard(),
        _ => Metric::strict(),
    })
}

fn parse_metric_name(name: &str) -> Result<(), CliError> {
    match name {
        "add" | "5mm10deg" | "2mm3deg" => Ok(()),
        other => Err(CliError::Config(format!(
            "metrics.metrics: unknown metric \"{other}\" (expected add, 5mm10deg or 2mm3deg)"
        ))),
    }
}

/// The whole config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub simulator: SimulatorSection,
    pub solver: SolverSection,
    pub matching: MatchingSection,
    pub metrics: MetricsSection,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.simulator.validate()?;
        self.solver.validate()?;
        self.matching.validate()?;
        self.metrics.validate()
    }

    /// Hash of the effective simulator section; embedded in scene files.
    pub fn simulator_hash(&self) -> String {
        section_hash("simulator", &self.simulator)
    }

    /// Hash of the effective solver + matching sections; embedded in
    /// results files.
    pub fn solver_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(canonical_toml("solver", &self.solver));
        hasher.update(canonical_toml("matching", &self.matching));
        hex(&hasher.finalize())
    }
}

fn canonical_toml<T: Serialize>(name: &str, section: &T) -> String {
    // Struct fields serialize in declaration order, so this string is a
    // canonical form of the section.
    let body = toml::to_string(section).expect("config sections serialize to TOML");
    format!("[{name}]\n{body}")
}

fn section_hash<T: Serialize>(name: &str, section: &T) -> String {
    hex(&Sha256::digest(canonical_toml(name, section)))
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(2 * bytes.len());
    for b in bytes {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let config = AppConfig::default();
        config.validate().unwrap();
        let h1 = config.simulator_hash();
        let h2 = config.simulator_hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        assert_ne!(h1, config.solver_hash());
    }

    #[test]
    fn field_override_changes_the_hash() {
        let base = AppConfig::default();
        let mut bumped = base.clone();
        bumped.simulator.seed = 7;
        assert_ne!(base.simulator_hash(), bumped.simulator_hash());
        assert_eq!(base.solver_hash(), bumped.solver_hash());
    }

    #[test]
    fn view_count_error_names_the_field() {
        let mut config = AppConfig::default();
        config.simulator.view_count = 1;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("simulator.view_count"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<AppConfig>("[simulator]\nviwe_count = 4\n").unwrap_err();
        assert!(err.to_string().contains("viwe_count"));
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let config: AppConfig =
            toml::from_str("[simulator]\nnoise_sigma_px = 1.0\n").unwrap();
        assert_eq!(config.simulator.noise_sigma_px, 1.0);
        assert_eq!(config.simulator.view_count, SimulatorSection::default().view_count);
        assert_eq!(config.solver, SolverSection::default());
    }

    #[test]
    fn models_honor_the_keypoint_budget() {
        for n in [32, 256, 512] {
            for model in ["box", "cylinder"] {
                let section = SimulatorSection {
                    model: model.into(),
                    keypoints: n,
                    ..SimulatorSection::default()
                };
                let built = section.build_model().unwrap();
                assert_eq!(built.keypoints.len(), n, "{model} at {n}");
            }
        }
    }

    #[test]
    fn metric_names_resolve() {
        let add = resolve_metric("add", 60.0, 0.1).unwrap();
        assert_eq!(add, Metric::Add { threshold_mm: 6.0 });
        assert_eq!(resolve_metric("5mm10deg", 60.0, 0.1).unwrap(), Metric::standard());
        assert_eq!(resolve_metric("2mm3deg", 60.0, 0.1).unwrap(), Metric::strict());
        assert!(resolve_metric("chamfer", 60.0, 0.1).is_err());
    }
}
