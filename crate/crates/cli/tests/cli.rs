use std::path::Path;
use std::process::{Command, Output};

use viewbench::binning::SubsetManifest;
use viewbench::synthetic::{self, SourceInstance, SyntheticDataset, SyntheticSpec};

fn viewbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewbench"))
        .args(args)
        .env_remove("VIEWBENCH_OUTPUT_ROOT")
        .output()
        .expect("run viewbench")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(dir: &Path) -> SyntheticDataset {
    let spec = SyntheticSpec {
        instances_per_class: 2,
        ..SyntheticSpec::default()
    };
    synthetic::generate(&dir.join("data"), &spec).unwrap()
}

fn model_flag(data: &SyntheticDataset) -> String {
    let (name, root) = &data.feature_roots[0];
    format!("{name}={}", root.display())
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    assert_eq!(code(&viewbench(&["--help"])), 0);
    assert_eq!(code(&viewbench(&["no-such-command"])), 1);
    assert_eq!(code(&viewbench(&["evaluate", "--k", "many"])), 1);
    let out = viewbench(&["evaluate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
}

#[test]
fn bin_views_reports_selected_frames() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic::write_source_tree(
        tmp.path(),
        &[SourceInstance {
            class_number: 7,
            instance_id: "a".into(),
            angles_deg: vec![0.0, 16.0, 31.0, 44.0, 59.0, 77.0, 92.0, 120.0],
            missing_masks: vec![],
        }],
    )
    .unwrap();
    let path = tmp.path().join("7/a/sparse/0/images.txt");
    let out = viewbench(&["bin-views", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.starts_with("bin_deg\timage_id\ttheta_deg\terror_deg\n"));
    assert!(text.contains("15\t2\t16.000000\t1.000000"));
    assert!(text.contains("90\t7\t92.000000\t2.000000"));
    assert!(text.contains("valid; max |error| 2.000000"));

    let out = viewbench(&["bin-views", path.to_str().unwrap(), "--tolerance", "1.5"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("invalid"));

    let out = viewbench(&["bin-views", tmp.path().join("missing.txt").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn build_subset_excludes_invalid_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("raw");
    let good = vec![0.0, 15.5, 29.0, 45.0, 61.0, 74.0, 90.5];
    synthetic::write_source_tree(
        &src,
        &[
            SourceInstance {
                class_number: 3,
                instance_id: "x1".into(),
                angles_deg: good.clone(),
                missing_masks: vec![],
            },
            SourceInstance {
                class_number: 3,
                instance_id: "x2".into(),
                angles_deg: good.clone(),
                missing_masks: vec![4],
            },
            SourceInstance {
                class_number: 9,
                instance_id: "y1".into(),
                angles_deg: good,
                missing_masks: vec![],
            },
        ],
    )
    .unwrap();
    let out_dir = tmp.path().join("subset");
    let out = viewbench(&[
        "build-subset",
        "--source",
        src.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--binary-masks",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = SubsetManifest::load(&out_dir.join("manifest.toml")).unwrap();
    assert_eq!(manifest.num_instances(), 2);
    manifest.validate_paths(&out_dir).unwrap();
    let exclusions = std::fs::read_to_string(out_dir.join("exclusions.tsv")).unwrap();
    assert_eq!(exclusions.lines().count(), 1);
    assert!(exclusions.starts_with("3/x2\t"));
    assert!(out_dir.join("images/3/15/x1_2.jpg").is_file());
    assert!(out_dir.join("masks/9/90/y1_7.png").is_file());

    let out = viewbench(&["stats", "--manifest", out_dir.join("manifest.toml").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn evaluate_honours_env_then_flag_for_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let env_root = tmp.path().join("from_env");
    let flag_root = tmp.path().join("from_flag");
    let model = model_flag(&data);
    let base = [
        "evaluate",
        "--manifest",
        data.manifest_path.to_str().unwrap(),
        "--model",
        &model,
        "--difficulty",
        "extreme",
    ];

    let out = Command::new(env!("CARGO_BIN_EXE_viewbench"))
        .args(base)
        .env("VIEWBENCH_OUTPUT_ROOT", &env_root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(env_root.join("experiment_a/summary.csv")).unwrap();
    assert_eq!(summary, "model,difficulty,capacity,miou,std\nsynthetic,Extreme,1024000,1.000000,0.000000\n");

    let mut args = base.to_vec();
    args.extend(["--output-root", flag_root.to_str().unwrap()]);
    let out = Command::new(env!("CARGO_BIN_EXE_viewbench"))
        .args(&args)
        .env("VIEWBENCH_OUTPUT_ROOT", &env_root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(flag_root.join("experiment_a/summary.csv").is_file());
}

#[test]
fn config_file_drives_all_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let (name, root) = &data.feature_roots[0];
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "manifest = {:?}\noutput_root = \"results\"\ncapacities = [64, 128]\ndifficulties = [\"Hard\", \"Extreme\"]\nk = 8\n\n[models.{name}]\nfeatures = {:?}\n",
            data.manifest_path.to_str().unwrap(),
            root.to_str().unwrap()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let results = tmp.path().join("results");

    for cmd in ["evaluate", "breaking-point", "memory-sweep"] {
        let out = viewbench(&[cmd, "--config", cfg]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(results.join("experiment_a/bins.csv").is_file());
    let breaking = std::fs::read_to_string(results.join("experiment_b/breaking_points.csv")).unwrap();
    assert!(breaking.contains("synthetic,None"));
    assert!(results.join("experiment_c/capacity_64/summary.csv").is_file());
    assert!(results.join("experiment_c/gains.csv").is_file());

    let out = viewbench(&["overlays", "--config", cfg, "--per-model", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(results.join("overlays/synthetic/Extreme").is_dir());

    let out = viewbench(&["report", "--config", cfg]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("Experiment B: breaking points"));
    assert!(results.join("report.md").is_file());

    let snapshot = tmp.path().join("bank/extreme.mbk");
    let out = viewbench(&[
        "build-bank",
        "--config",
        cfg,
        "--bank-model",
        "synthetic",
        "--capacity",
        "50",
        "--out",
        snapshot.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(snapshot.is_file());
    let prov = std::fs::read_to_string(tmp.path().join("bank/extreme.mbk.prov.tsv")).unwrap();
    assert!(prov.lines().count() >= 50);
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let (_, root) = &data.feature_roots[0];
    let victim = root.join("images/100/30/inst00_3.pfv");
    std::fs::remove_file(&victim).unwrap();
    let model = model_flag(&data);
    let out_root = tmp.path().join("out");
    let out = viewbench(&[
        "evaluate",
        "--manifest",
        data.manifest_path.to_str().unwrap(),
        "--model",
        &model,
        "--output-root",
        out_root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("inst00_3.pfv"));

    let out = viewbench(&[
        "evaluate",
        "--manifest",
        data.manifest_path.to_str().unwrap(),
        "--model",
        &model,
        "--k",
        "0",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn synth_writes_a_runnable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("demo");
    let out = viewbench(&["synth", "--out", dir.to_str().unwrap(), "--models", "a,b"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("features/b").is_dir());
    let cfg = dir.join("run.toml");
    let out = viewbench(&[
        "breaking-point",
        "--config",
        cfg.to_str().unwrap(),
        "--no-save-predictions",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.join("results/experiment_b/curve_normalized.csv")).unwrap();
    assert_eq!(curve.lines().count(), 8);
}
