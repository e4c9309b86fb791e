//! The three commands: simulate scene batches, estimate poses for them,
//! and evaluate results against ground truth.
//!
//! Scene and results files are bit-reproducible functions of (config,
//! seed); per-scene and per-instance seeds derive from ids, never from
//! execution order, so `--jobs` changes wall time and nothing else.
//! Wall-clock timings go to a `.timings.json` sidecar that makes no
//! reproducibility promise.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mvpose_core::geometry::Point3D;
use mvpose_core::metrics::{assign_estimates, average_recall, Metric, RecallItem};
use mvpose_core::pipeline::PipelineConfig;
use mvpose_core::pose::Pose;
use mvpose_core::rng::derive_seed;
use mvpose_core::scene::{
    load_results_file, load_scene_file, save_results_file, save_scene_file,
    InstanceResultRecord, ModelRecord, ResultsFile, SceneFile, SceneRecord, SceneResultRecord,
    UnitsRecord, SCHEMA_VERSION,
};
use mvpose_core::simulator::generate_scene;
use mvpose_core::symmetry::SymmetryGroup;

use crate::config::{resolve_metric, AppConfig};
use crate::report::{Report, ReportRow, SeriesRow};
use crate::{CliError, EstimateArgs, EvaluateArgs, SimulateArgs};

/// Attaches the file path to a scene-file error, preserving its failure
/// class.
fn scene_io(path: &Path, e: mvpose_core::scene::SceneError) -> CliError {
    use mvpose_core::scene::SceneError;
    match e {
        SceneError::SchemaMismatch { .. } => CliError::Schema(format!("{}: {e}", path.display())),
        SceneError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Io(format!("{}: {other}", path.display())),
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config = AppConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.simulator.seed = seed;
    }
    if let Some(views) = args.views {
        config.simulator.view_count = views;
    }
    if let Some(keypoints) = args.keypoints {
        config.simulator.keypoints = keypoints;
    }
    config.validate()?;

    let sim = &config.simulator;
    let model = sim.build_model()?;
    let pool = thread_pool(args.jobs)?;
    let scenes: Vec<Result<SceneRecord, CliError>> = pool.install(|| {
        (0..sim.scene_count)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(sim.seed, i as u64);
                let scene = generate_scene(&sim.scene_config(seed), &model)
                    .map_err(|e| CliError::Config(format!("scene {i}: {e}")))?;
                Ok(SceneRecord::from_scene(i, seed, &scene))
            })
            .collect()
    });
    let scenes: Vec<SceneRecord> = scenes.into_iter().collect::<Result<_, _>>()?;

    let instances: usize = scenes.iter().map(|s| s.truth.poses.len()).sum();
    let file = SceneFile {
        schema_version: SCHEMA_VERSION,
        config_hash: config.simulator_hash(),
        seed: sim.seed,
        units: UnitsRecord::default(),
        model: ModelRecord::from_model(&model),
        scenes,
    };
    save_scene_file(&args.out, &file).map_err(|e| scene_io(&args.out, e))?;
    println!(
        "wrote {}: {} scenes, {} views x {} keypoints, {} instances, seed {}, config {}",
        args.out.display(),
        sim.scene_count,
        sim.view_count,
        sim.keypoints,
        instances,
        sim.seed,
        &file.config_hash[..12],
    );
    Ok(())
}

/// Per-scene wall-clock solve times, parallel to the results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneTimings {
    pub scene_id: usize,
    pub instance_ms: Vec<f64>,
}

/// Sidecar written next to the results file. Deliberately separate:
/// results stay byte-reproducible, timings never are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingsFile {
    pub schema_version: u32,
    pub results_config_hash: String,
    pub total_ms: f64,
    pub scenes: Vec<SceneTimings>,
}

/// `<out>.timings.json` for a results path `<out>`.
pub fn timings_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_os_string();
    os.push(".timings.json");
    PathBuf::from(os)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let scene_file = load_scene_file(&args.scene).map_err(|e| scene_io(&args.scene, e))?;
    let mut config = AppConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.solver.seed = seed;
    }
    if args.no_refine {
        config.solver.refine = false;
    }
    config.validate()?;

    let model_keypoints = scene_file.model.keypoints_vec();
    let base = PipelineConfig {
        matching: config.matching.matching_config(),
        solver: config.solver.solver_config(),
    };
    let pool = thread_pool(args.jobs)?;
    let solved: Vec<Result<(SceneResultRecord, SceneTimings), CliError>> = pool.install(|| {
        scene_file
            .scenes
            .par_iter()
            .map(|rec| {
                let views = rec.views()?;
                let observations = rec.observations()?;
                let mut pipeline = base.clone();
                pipeline.solver.seed = derive_seed(base.solver.seed, rec.scene_id as u64);
                let result =
                    mvpose_core::pipeline::run_scene(&views, &observations, &model_keypoints, &pipeline)
                        .map_err(|e| CliError::Batch(format!("scene {}: {e}", rec.scene_id)))?;
                let instances = result
                    .instances
                    .iter()
                    .map(|r| {
                        InstanceResultRecord::from_outcome(
                            r.association.attached().map(|(v, _)| v).collect(),
                            &r.outcome,
                        )
                    })
                    .collect();
                let instance_ms = result.instances.iter().map(|r| r.solve_ms).collect();
                Ok((
                    SceneResultRecord { scene_id: rec.scene_id, instances },
                    SceneTimings { scene_id: rec.scene_id, instance_ms },
                ))
            })
            .collect()
    });
    let mut scenes = Vec::with_capacity(solved.len());
    let mut timings = Vec::with_capacity(solved.len());
    for item in solved {
        let (record, timing) = item?;
        scenes.push(record);
        timings.push(timing);
    }

    let results = ResultsFile {
        schema_version: SCHEMA_VERSION,
        config_hash: config.solver_hash(),
        scene_config_hash: scene_file.config_hash.clone(),
        seed: config.solver.seed,
        scenes,
    };
    save_results_file(&args.out, &results).map_err(|e| scene_io(&args.out, e))?;

    let total: usize = results.scenes.iter().map(|s| s.instances.len()).sum();
    let ok: usize = results
        .scenes
        .iter()
        .map(|s| s.instances.iter().filter(|i| i.is_ok()).count())
        .sum();
    let truth_instances: usize = scene_file.scenes.iter().map(|s| s.truth.poses.len()).sum();
    let solve_ms: f64 = timings.iter().flat_map(|t| &t.instance_ms).sum();

    let sidecar = TimingsFile {
        schema_version: SCHEMA_VERSION,
        results_config_hash: results.config_hash.clone(),
        total_ms: started.elapsed().as_secs_f64() * 1e3,
        scenes: timings,
    };
    let sidecar_path = timings_path(&args.out);
    let mut body =
        serde_json::to_vec_pretty(&sidecar).map_err(|e| CliError::Io(e.to_string()))?;
    body.push(b'\n');
    std::fs::write(&sidecar_path, body)
        .map_err(|e| CliError::Io(format!("{}: {e}", sidecar_path.display())))?;

    println!(
        "wrote {}: {} scenes, {}/{} instances ok ({} ground-truth), mean solve {:.2} ms",
        args.out.display(),
        results.scenes.len(),
        ok,
        total,
        truth_instances,
        if total > 0 { solve_ms / total as f64 } else { 0.0 },
    );
    if total > 0 && ok == 0 {
        return Err(CliError::Batch("no instance in the batch produced a pose".into()));
    }
    Ok(())
}

/// Recall counts under the same visibility gate `average_recall` applies.
fn count_recall(
    items: &[RecallItem],
    model_points: &[Point3D],
    group: &SymmetryGroup,
    metric: Metric,
) -> Result<(usize, usize), CliError> {
    let mut evaluable = 0;
    let mut recalled = 0;
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
    Ok((evaluable, recalled))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let results = load_results_file(&args.results).map_err(|e| scene_io(&args.results, e))?;
    let scene_file = load_scene_file(&args.scene).map_err(|e| scene_io(&args.scene, e))?;
    if results.scene_config_hash != scene_file.config_hash {
        return Err(CliError::Schema(format!(
            "results were estimated from scene config {}, but this scene file has {}",
            results.scene_config_hash, scene_file.config_hash
        )));
    }

    let config = AppConfig::load(args.config.as_deref())?;
    config.validate()?;
    let metric_names: &[String] =
        if args.metrics.is_empty() { &config.metrics.metrics } else { &args.metrics };
    let model = &scene_file.model;
    let model_points = model.model_points_vec();
    let group = model.symmetry_group()?;
    let factor = config.metrics.add_threshold_factor;

    let by_id: HashMap<usize, &SceneRecord> =
        scene_file.scenes.iter().map(|s| (s.scene_id, s)).collect();

    // Recall items and false-detection counts pooled per view count.
    let mut pooled: BTreeMap<usize, (Vec<RecallItem>, usize)> = BTreeMap::new();
    for scene in &results.scenes {
        let rec = by_id.get(&scene.scene_id).ok_or_else(|| {
            CliError::Schema(format!(
                "results reference scene {} missing from the scene file",
                scene.scene_id
            ))
        })?;
        let truths: Vec<Pose> = rec.truth.poses.iter().map(|p| p.to_pose()).collect();
        if rec.truth.peak_visibility.len() != truths.len() {
            return Err(CliError::Io(format!(
                "scene {}: truth visibility does not cover every instance",
                scene.scene_id
            )));
        }
        let estimates: Vec<Pose> = scene
            .instances
            .iter()
            .filter_map(|i| i.pose.as_ref().map(|p| p.to_pose()))
            .collect();
        let assignment = assign_estimates(&estimates, &truths, &model_points, &group)?;
        let entry = pooled.entry(rec.cameras.len()).or_default();
        for (t, matched) in assignment.matched.iter().enumerate() {
            entry.0.push(RecallItem {
                estimate: matched.map(|e| estimates[e]),
                truth: truths[t],
                visibility: rec.truth.peak_visibility[t],
            });
        }
        entry.1 += assignment.false_detections;
    }

    let keypoints = model.keypoints.len();
    let mut rows = Vec::new();
    for (&views, (items, false_detections)) in &pooled {
        for name in metric_names {
            let metric = resolve_metric(name, model.diameter_mm, factor)?;
            let (evaluable, recalled) = count_recall(items, &model_points, &group, metric)?;
            let ar = average_recall(items, &model_points, &group, metric)?;
            rows.push(ReportRow {
                object: model.name.clone(),
                views,
                keypoints,
                metric: name.clone(),
                evaluable,
                recalled,
                false_detections: *false_detections,
                ar,
            });
        }
    }

    let mean_ms = match &args.timings {
        Some(path) => {
            let text = std::fs::read(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let file: TimingsFile = serde_json::from_slice(&text)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            if file.schema_version != SCHEMA_VERSION {
                return Err(CliError::Schema(format!(
                    "timings schema version {}, this build reads {}",
                    file.schema_version, SCHEMA_VERSION
                )));
            }
            let ms: Vec<f64> =
                file.scenes.iter().flat_map(|s| s.instance_ms.iter().copied()).collect();
            if ms.is_empty() { None } else { Some(ms.iter().sum::<f64>() / ms.len() as f64) }
        }
        None => None,
    };

    let all_items: Vec<RecallItem> =
        pooled.values().flat_map(|(items, _)| items.iter().cloned()).collect();
    let mut series = Vec::new();
    for name in metric_names {
        let metric = resolve_metric(name, model.diameter_mm, factor)?;
        let ar = average_recall(&all_items, &model_points, &group, metric)?;
        series.push(SeriesRow {
            keypoints,
            metric: name.clone(),
            ar,
            mean_solve_ms: mean_ms,
        });
    }

    let report = Report {
        results_config_hash: results.config_hash.clone(),
        scene_config_hash: results.scene_config_hash.clone(),
        seed: results.seed,
        scene_count: results.scenes.len(),
        rows,
        series,
    };
    let tsv = report.to_tsv();
    if let Some(out) = &args.out {
        std::fs::write(out, tsv.as_bytes())
            .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        if args.pretty {
            print!("{}", report.to_pretty());
        } else {
            println!("wrote {}", out.display());
        }
    } else if args.pretty {
        print!("{}", report.to_pretty());
    } else {
        print!("{tsv}");
    }
    Ok(())
}
