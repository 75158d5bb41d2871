//! End-to-end checks of the command-line binary.

use std::process::{Command, Output};

use sdeverse::formats::{read_training_records, save_sample_set};
use sdeverse::simulator::SampleSet;
use sdeverse::universe::{sample_system, CurriculumLevel};
use sdeverse::RngStream;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeverse")).args(args).output().unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["recover", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["recover", "--level", "9"]).status.code(), Some(1));
    assert_eq!(run(&["recover", "--forecasters", "arima"]).status.code(), Some(1));
}

#[test]
fn validate_spec_accepts_sampled_and_rejects_edited() {
    let dir = tempfile::tempdir().unwrap();
    let spec = sample_system(CurriculumLevel::new(4).unwrap(), 1, 3, &RngStream::new(5)).unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, spec.to_json().unwrap()).unwrap();
    let out = run(&["validate-spec", "--spec", good.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "valid");

    let mut bad = spec.clone();
    bad.jumps.enabled = true;
    bad.jumps.intensity = vec![1.0; 4];
    let path = dir.path().join("bad.json");
    std::fs::write(&path, bad.to_json().unwrap()).unwrap();
    let out = run(&["validate-spec", "--spec", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stdout.is_empty());
}

#[test]
fn score_prints_one_row_per_horizon_and_average() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(9);
    let mut make = |name: &str, shift: f64| {
        let mut set = SampleSet::zeros(40, 5, 3, 0.01);
        set.values.iter_mut().for_each(|v| *v = rng.normal() + shift);
        let path = dir.path().join(name);
        save_sample_set(&path, &set).unwrap();
        path
    };
    let forecast = make("model.bin", 0.5);
    let oracle = make("oracle.bin", 0.0);
    let out = run(&[
        "score",
        "--forecast",
        forecast.to_str().unwrap(),
        "--oracle",
        oracle.to_str().unwrap(),
        "--targets",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[1].starts_with("oracle,model,1,"));
    assert!(lines[6].starts_with("oracle,model,avg,"));

    let missing = run(&["score", "--forecast", "nope.bin", "--oracle", oracle.to_str().unwrap(), "--targets", "2"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn export_stream_writes_readable_records() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("stream.bin");
    let out = run(&[
        "export-stream",
        "--records",
        "5",
        "--level",
        "3",
        "--targets",
        "2",
        "--history-steps",
        "80",
        "--horizon",
        "6",
        "--oracle-paths",
        "4",
        "--out",
        sink.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = read_training_records(std::fs::File::open(&sink).unwrap()).unwrap();
    assert_eq!(recs.len(), 5);
    for r in &recs {
        assert_eq!(r.system_spec.level.get(), 3);
        assert_eq!((r.history.n_steps, r.future_branches.n_samples, r.future_branches.horizon), (80, 4, 6));
    }
}

#[test]
fn recover_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "recover",
        "--systems",
        "2",
        "--oracle-paths",
        "50",
        "--forecast-paths",
        "50",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scores.csv", "summary.csv", "fit_status.csv", "failures.csv", "run_log.txt", "energy.svg"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("forecaster,horizon,n_systems,"));
}
