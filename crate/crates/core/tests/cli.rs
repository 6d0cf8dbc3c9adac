use std::path::Path;
use std::process::{Command, Output};

use inertial_odometry::metrics::MetricReport;
use inertial_odometry::pipeline::{truth_estimate, write_estimate};
use inertial_odometry::sim::load_recording;

fn iodo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iodo"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("iodo runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = iodo(args, dir);
    assert!(
        out.status.success(),
        "iodo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn simulate_with_a_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            &[
                "simulate",
                "--seed",
                "7",
                "--count",
                "2",
                "--duration",
                "20",
                "--out",
                out,
            ],
            dir.path(),
        );
    }
    for f in ["rec_00007.csv", "rec_00008.csv"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)));
    }
    assert_ne!(
        read(dir.path().join("a/rec_00007.csv")),
        read(dir.path().join("a/rec_00008.csv"))
    );
}

#[test]
fn evaluating_truth_against_itself_gives_zeros() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["simulate", "--seed", "3", "--duration", "70", "--out", "."],
        dir.path(),
    );
    let rec = load_recording(&dir.path().join("rec_00003.csv")).unwrap();
    write_estimate(&dir.path().join("est.csv"), &truth_estimate(rec.truth().unwrap())).unwrap();
    let out = ok(
        &[
            "evaluate",
            "--estimate",
            "est.csv",
            "--truth",
            "rec_00003.csv",
            "--json",
            "report.json",
        ],
        dir.path(),
    );
    let report = MetricReport::from_json(&String::from_utf8(read(dir.path().join("report.json"))).unwrap()).unwrap();
    assert_eq!(report.ate, Some(0.0));
    assert_eq!(report.t_rte, Some(0.0));
    assert_eq!(report.d_rte, Some(0.0));
    assert_eq!(report.orient_rmse, Some(0.0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with(&report.to_json()));
    assert!(stdout.contains("ATE                    0.0000 m"));
}

#[test]
fn errors_exit_nonzero_with_a_tagged_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = iodo(
        &["evaluate", "--estimate", "missing.csv", "--truth", "missing.csv"],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[io]: "), "{err}");

    std::fs::write(dir.path().join("bad.toml"), "learning_rate = 1\n").unwrap();
    ok(
        &["simulate", "--seed", "1", "--duration", "5", "--out", "d"],
        dir.path(),
    );
    let out = iodo(
        &["train-orient", "--train", "d", "--config", "bad.toml", "--out", "w.ifw"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]: "));
}

#[test]
fn plot_and_bench_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["simulate", "--seed", "4", "--duration", "10", "--out", "."],
        dir.path(),
    );
    let rec = load_recording(&dir.path().join("rec_00004.csv")).unwrap();
    write_estimate(&dir.path().join("est.csv"), &truth_estimate(rec.truth().unwrap())).unwrap();
    ok(
        &[
            "plot",
            "--truth",
            "rec_00004.csv",
            "--estimate",
            "copy=est.csv",
            "--output",
            "p.svg",
        ],
        dir.path(),
    );
    let svg = String::from_utf8(read(dir.path().join("p.svg"))).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let out = ok(
        &["bench", "--hidden", "8", "--seconds", "5", "--repeat", "2"],
        dir.path(),
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("ms per 100 samples"));
}
