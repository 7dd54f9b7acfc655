use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vpl(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpl"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A synthetic dataset with a config trimmed to `views` views.
fn dataset(dir: &Path, views: usize) -> PathBuf {
    let out = Command::new(env!("CARGO_BIN_EXE_vpl"))
        .args(["synth", "--out"])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let config = dir.join("vpl.toml");
    let text = fs::read_to_string(&config).unwrap();
    fs::write(
        &config,
        text.replace("count = 600", &format!("count = {views}")),
    )
    .unwrap();
    config
}

fn set_key(config: &Path, key: &str, line: &str) {
    let text = fs::read_to_string(config).unwrap();
    let out: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with(&format!("{key} =")) {
                line.to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(config, out.join("\n")).unwrap();
}

#[test]
fn run_writes_labels_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 8);
    let out = vpl(&config, &["run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let work = dir.path().join("work");
    for f in [
        "cloud.bin",
        "votes/table.bin",
        "labels/hard_sum.label",
        "labels/hard_sum.json",
        "report.json",
        "report.txt",
        "report.csv",
    ] {
        assert!(work.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(work.join("report.json")).unwrap()).unwrap();
    assert!(report["miou"].as_f64().unwrap() > 0.0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(work.join("labels/hard_sum.json")).unwrap())
            .unwrap();
    assert_eq!(summary["estimator"], "hard_sum");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("miou:"));
}

#[test]
fn render_after_align_writes_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 3);
    assert!(vpl(&config, &["align"]).status.success());
    let out = vpl(&config, &["render"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("align: cached"));
    let views = dir.path().join("work/views");
    for i in 0..3 {
        assert!(views.join(format!("view_{i:06}.png")).is_file());
        assert!(views.join(format!("view_{i:06}.txt")).is_file());
    }
}

#[test]
fn second_estimator_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 4);
    let first = vpl(&config, &["vote", "--estimator", "hard_sum"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains("render: computed"));
    let second = vpl(&config, &["vote", "--estimator", "soft_sum"]);
    assert!(second.status.success(), "{}", stderr(&second));
    let log = stderr(&second);
    assert!(
        log.contains("render: cached") && log.contains("segment: cached"),
        "{log}"
    );
    let labels = dir.path().join("work/labels");
    assert!(labels.join("hard_sum.label").is_file());
    assert!(labels.join("soft_sum.label").is_file());
}

#[test]
fn upstream_change_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 3);
    assert!(vpl(&config, &["segment"]).status.success());
    set_key(&config, "count", "count = 4");
    let out = vpl(&config, &["segment"]);
    let log = stderr(&out);
    assert!(
        log.contains("align: cached")
            && log.contains("render: computed")
            && log.contains("segment: computed"),
        "{log}"
    );
    assert!(!dir.path().join("work/views/view_000004.png").exists());
    assert!(dir.path().join("work/views/view_000003.png").exists());

    set_key(&config, "noise_rate", "noise_rate = 0.2");
    let log = stderr(&vpl(&config, &["segment"]));
    assert!(
        log.contains("render: cached") && log.contains("segment: computed"),
        "{log}"
    );

    let log = stderr(&vpl(&config, &["segment", "--force"]));
    assert!(
        log.contains("align: computed") && log.contains("render: computed"),
        "{log}"
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 5);
    set_key(&config, "noise_rate", "noise_rate = 0.3");
    assert!(vpl(&config, &["vote", "--workers", "1"]).status.success());
    let a = fs::read(dir.path().join("work/labels/hard_sum.label")).unwrap();
    assert!(vpl(&config, &["vote", "--force", "--workers", "4"])
        .status
        .success());
    let b = fs::read(dir.path().join("work/labels/hard_sum.label")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_without_ground_truth_fails_in_eval_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 2);
    set_key(&config, "labels", "");
    let out = vpl(&config, &["eval"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(
        err.contains("error [eval]") && err.contains("ground truth"),
        "{err}"
    );
}

#[test]
fn external_segmenter_with_empty_results_fails_in_segment_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path(), 2);
    let results = dir.path().join("results");
    fs::create_dir(&results).unwrap();
    let text = fs::read_to_string(&config).unwrap();
    let text = text.replace(
        "kind = \"oracle\"",
        "kind = \"external\"\nresult_dir = \"results\"",
    );
    fs::write(&config, text).unwrap();
    let out = vpl(&config, &["run"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("error [segment]"), "{err}");
    // the views the external tool needs were still produced
    assert!(dir.path().join("work/views/view_000001.png").is_file());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "views.cuont = 3\n").unwrap();
    let out = vpl(&config, &["run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error [config]"), "{}", stderr(&out));
}

#[test]
fn unknown_estimator_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_vpl"))
        .args(["vote", "--estimator", "median"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("median"));
}
