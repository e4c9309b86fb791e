//! End-to-end tests of the `mvpose` binary: artifact round-trips,
//! determinism across worker counts, exit codes, and report content.

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::Vector3;

use mvpose_core::pose::geodesic_angle;
use mvpose_core::scene::{
    load_results_file, load_scene_file, save_results_file, save_scene_file,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvpose"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str], expected_code: i32) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "command {args:?}: stderr {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("test paths are UTF-8")
}

#[test]
fn minimal_two_view_config_round_trips_through_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nview_count = 2\nkeypoints = 32\nscene_count = 1\nseed = 5\n",
    );
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&[
        "estimate",
        "--scene",
        path_str(&scene),
        "--out",
        path_str(&results),
    ]);
    let loaded = load_results_file(&results).unwrap();
    assert_eq!(loaded.scenes.len(), 1);
    assert!(loaded.scenes[0].instances.iter().all(|i| i.is_ok()));
}

#[test]
fn same_config_and_seed_reproduce_files_bytewise_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nkeypoints = 48\nscene_count = 4\ninstance_count = 2\n\
         noise_sigma_px = 0.7\noutlier_ratio = 0.1\nocclusion_prob = 0.05\nseed = 21\n",
    );
    let paths: Vec<PathBuf> =
        (0..2).map(|i| dir.path().join(format!("scene{i}.json"))).collect();
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&paths[0])]);
    run_ok(&[
        "simulate", "--config", path_str(&config), "--out", path_str(&paths[1]),
        "--jobs", "3",
    ]);
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());

    let results: Vec<PathBuf> =
        (0..2).map(|i| dir.path().join(format!("results{i}.json"))).collect();
    run_ok(&[
        "estimate", "--scene", path_str(&paths[0]), "--out", path_str(&results[0]),
    ]);
    run_ok(&[
        "estimate", "--scene", path_str(&paths[0]), "--out", path_str(&results[1]),
        "--jobs", "3",
    ]);
    assert_eq!(
        std::fs::read(&results[0]).unwrap(),
        std::fs::read(&results[1]).unwrap()
    );
}

#[test]
fn view_count_of_one_is_rejected_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[simulator]\nview_count = 1\n");
    let stderr = run_err(
        &["simulate", "--config", path_str(&config), "--out", path_str(&dir.path().join("x.json"))],
        2,
    );
    assert!(stderr.contains("simulator.view_count"), "{stderr}");
}

#[test]
fn zero_noise_batch_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nkeypoints = 64\nscene_count = 3\ninstance_count = 2\nseed = 9\n",
    );
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&["estimate", "--scene", path_str(&scene), "--out", path_str(&results)]);

    let scene_file = load_scene_file(&scene).unwrap();
    let results_file = load_results_file(&results).unwrap();
    for (scene_rec, result_rec) in scene_file.scenes.iter().zip(&results_file.scenes) {
        assert!(result_rec.instances.iter().all(|i| i.is_ok()));
        let estimates: Vec<_> = result_rec
            .instances
            .iter()
            .map(|i| i.pose.as_ref().unwrap().to_pose())
            .collect();
        // Association order is arbitrary; every truth pose must have an
        // essentially exact estimate.
        for truth_rec in &scene_rec.truth.poses {
            let truth = truth_rec.to_pose();
            let best = estimates
                .iter()
                .map(|e| {
                    ((e.translation - truth.translation).norm(), geodesic_angle(&e.rotation, &truth.rotation))
                })
                .min_by(|a, b| a.partial_cmp(b).unwrap())
                .unwrap();
            assert!(best.0 < 1e-6, "translation error {} mm", best.0);
            assert!(best.1 < 1e-8, "rotation error {} rad", best.1);
        }
    }
}

#[test]
fn starved_instance_is_reported_failed_without_breaking_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nkeypoints = 64\nscene_count = 1\ninstance_count = 2\nseed = 33\n",
    );
    let scene = dir.path().join("scene.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);

    // Starve instance 1 down to two visible keypoints per view: the
    // matcher can still associate it, but no pose is recoverable from
    // two points and the solver must report that instance failed.
    let mut scene_file = load_scene_file(&scene).unwrap();
    {
        let rec = &mut scene_file.scenes[0];
        let slots: Vec<Option<usize>> =
            rec.truth.slot_of_instance.iter().map(|per_view| per_view[1]).collect();
        for (view, slot) in slots.iter().enumerate() {
            let slot = slot.expect("clean scene: instance visible everywhere");
            for (k, vis) in rec.observations[view][slot].visibility.iter_mut().enumerate() {
                *vis = *vis && k < 2;
            }
        }
    }
    save_scene_file(&scene, &scene_file).unwrap();

    let results = dir.path().join("results.json");
    run_ok(&["estimate", "--scene", path_str(&scene), "--out", path_str(&results)]);
    let results_file = load_results_file(&results).unwrap();
    let instances = &results_file.scenes[0].instances;
    assert_eq!(instances.len(), 2);
    assert_eq!(instances.iter().filter(|i| i.is_ok()).count(), 1);
    let failed = instances.iter().find(|i| !i.is_ok()).unwrap();
    assert!(failed.pose.is_none());
    assert!(!failed.status.is_empty());

    let report = run_ok(&[
        "evaluate", "--results", path_str(&results), "--scene", path_str(&scene),
        "--metric", "5mm10deg",
    ]);
    let row = report
        .lines()
        .find(|l| l.starts_with("box\t"))
        .expect("report has a recall row");
    let fields: Vec<&str> = row.split('\t').collect();
    assert_eq!(fields[4], "2", "both instances evaluable: {row}");
    assert_eq!(fields[5], "1", "one instance recalled: {row}");
    assert_eq!(fields[7], "50.0000", "{row}");
}

#[test]
fn perfect_results_score_100_and_a_spoiled_quarter_scores_75() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nkeypoints = 48\nscene_count = 4\nseed = 70\n",
    );
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&["estimate", "--scene", path_str(&scene), "--out", path_str(&results)]);

    let report = run_ok(&[
        "evaluate", "--results", path_str(&results), "--scene", path_str(&scene),
    ]);
    for line in report.lines().filter(|l| l.starts_with("box\t")) {
        assert!(line.ends_with("\t100.0000"), "{line}");
    }

    // Push one of the four estimates far from its truth; recall drops to
    // exactly 75 under every metric.
    let mut spoiled = load_results_file(&results).unwrap();
    let pose = spoiled.scenes[0].instances[0].pose.as_mut().unwrap();
    let mut moved = pose.to_pose();
    moved.translation += Vector3::new(500.0, 0.0, 0.0);
    *pose = mvpose_core::scene::PoseRecord::from_pose(&moved);
    let spoiled_path = dir.path().join("spoiled.json");
    save_results_file(&spoiled_path, &spoiled).unwrap();

    let report = run_ok(&[
        "evaluate", "--results", path_str(&spoiled_path), "--scene", path_str(&scene),
    ]);
    for line in report.lines().filter(|l| l.starts_with("box\t")) {
        assert!(line.ends_with("\t75.0000"), "{line}");
    }
}

#[test]
fn report_columns_match_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[simulator]\nkeypoints = 32\nscene_count = 1\n");
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&["estimate", "--scene", path_str(&scene), "--out", path_str(&results)]);
    let timings = format!("{}.timings.json", results.display());
    let report = run_ok(&[
        "evaluate", "--results", path_str(&results), "--scene", path_str(&scene),
        "--timings", &timings,
    ]);

    let mut lines = report.lines();
    for expected in [
        "# multi-view pose evaluation report",
        "# schema_version\t1",
    ] {
        assert_eq!(lines.next(), Some(expected));
    }
    let rest: Vec<&str> = lines.collect();
    let header = "object\tviews\tkeypoints\tmetric\tevaluable\trecalled\tfalse_detections\tar";
    let series_header = "series\tkeypoints\tmetric\tar\tmean_solve_ms";
    assert!(rest.contains(&header), "{report}");
    assert!(rest.contains(&series_header), "{report}");
    let series_rows: Vec<&&str> = rest
        .iter()
        .filter(|l| l.starts_with("series\t") && **l != series_header)
        .collect();
    assert_eq!(series_rows.len(), 3, "{report}");
    for row in series_rows {
        // Timings supplied, so the runtime column must be populated.
        let last = row.split('\t').next_back().unwrap();
        assert!(last.parse::<f64>().is_ok(), "{row}");
    }
}

#[test]
fn mismatched_inputs_and_future_schemas_exit_with_code_5() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[simulator]\nkeypoints = 32\nscene_count = 1\n");
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&["estimate", "--scene", path_str(&scene), "--out", path_str(&results)]);

    // A scene file regenerated with another seed no longer matches the
    // hash recorded in the results.
    let other_scene = dir.path().join("other.json");
    run_ok(&[
        "simulate", "--config", path_str(&config), "--out", path_str(&other_scene),
        "--seed", "999",
    ]);
    let stderr = run_err(
        &["evaluate", "--results", path_str(&results), "--scene", path_str(&other_scene)],
        5,
    );
    assert!(stderr.contains("scene config"), "{stderr}");

    // Bump the schema version in place.
    let mut value: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&scene).unwrap()).unwrap();
    value["schema_version"] = serde_json::json!(99);
    let future = dir.path().join("future.json");
    std::fs::write(&future, serde_json::to_vec(&value).unwrap()).unwrap();
    run_err(
        &["estimate", "--scene", path_str(&future), "--out", path_str(&results)],
        5,
    );
}

#[test]
fn missing_input_files_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_err(
        &[
            "estimate",
            "--scene",
            path_str(&dir.path().join("nope.json")),
            "--out",
            path_str(&dir.path().join("out.json")),
        ],
        3,
    );
    assert!(stderr.contains("nope.json"), "{stderr}");
}

#[test]
fn no_refine_flag_stops_after_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[simulator]\nkeypoints = 32\nscene_count = 1\nnoise_sigma_px = 0.5\nseed = 2\n",
    );
    let scene = dir.path().join("scene.json");
    let results = dir.path().join("results.json");
    run_ok(&["simulate", "--config", path_str(&config), "--out", path_str(&scene)]);
    run_ok(&[
        "estimate", "--scene", path_str(&scene), "--out", path_str(&results),
        "--no-refine",
    ]);
    let loaded = load_results_file(&results).unwrap();
    for instance in &loaded.scenes[0].instances {
        assert_eq!(instance.stage.as_deref(), Some("aligned"));
    }
}

#[test]
fn zero_jobs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_err(
        &[
            "simulate",
            "--out",
            path_str(&dir.path().join("x.json")),
            "--jobs",
            "0",
        ],
        2,
    );
    assert!(stderr.contains("--jobs"), "{stderr}");
}
