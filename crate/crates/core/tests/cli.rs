//! End-to-end runs of the `recfg` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn recfg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recfg"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("RECFG_OUT")
        .output()
        .expect("binary runs")
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

const SMALL: [&str; 8] = [
    "--set",
    "grid.nfe=64",
    "--set",
    "sampling.batch=2000",
    "--set",
    "table.n_per_condition=5000",
    "--set",
    "guidance.gammas=[1.5,2.0]",
];

#[test]
fn shift_analyze_reports_integer_limits() {
    let dir = tempfile::tempdir().unwrap();
    let out = recfg(
        dir.path(),
        &["shift-analyze", "--set", "shift.gammas=[1.0,3.0]"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader =
        csv::Reader::from_path(dir.path().join("shift-analyze/shift_report.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut seen = 0;
    for row in reader.records() {
        let row = row.unwrap();
        if &row[col("kind")] != "cfg" || &row[col("horizon")] != "inf" {
            continue;
        }
        let gamma: f64 = row[col("gamma1")].parse().unwrap();
        let m: f64 = row[col("mean_coeff")].parse().unwrap();
        let want = if gamma == 1.0 { 1.0 } else { 2.0 };
        assert!((m - want).abs() < 1e-9, "gamma {gamma}: {m}");
        seen += 1;
    }
    // quadrature and closed-form rows for both weights
    assert_eq!(seen, 4);
}

#[test]
fn build_table_from_cache_reports_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.csv");
    fs::write(
        &cache,
        "cond_id,t_index,dim,sum_cond,sum_uncond,count\n1,0,0,1,2,10\n1,1,0,1,2,10\n1,2,0,1,2,10\n",
    )
    .unwrap();
    let cache_arg = format!("table.cache=\"{}\"", cache.display());
    let args = [
        "build-table",
        "--set",
        "grid.nfe=4",
        "--set",
        cache_arg.as_str(),
    ];

    let out = recfg(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("build-table/error.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(err["exit_code"], 1);
    assert_eq!(err["gaps"][0]["t_index"], 3);
    assert_eq!(err["gaps"][0]["cond_id"], "1");

    let mut text = fs::read_to_string(&cache).unwrap();
    text.push_str("1,3,0,0.5,2,10\n");
    fs::write(&cache, text).unwrap();
    let out = recfg(dir.path(), &args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("build-table/table.json").exists());
    assert!(
        !dir.path().join("build-table/error.json").exists(),
        "stale error report removed"
    );
    let table = recfg::table::load_table(&dir.path().join("build-table/table.json")).unwrap();
    assert_eq!(table.ratios("1", 3).unwrap(), &[0.25]);
}

#[test]
fn invalid_configuration_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["sample", "--set", "grid.nfe=0"][..],
        &["sample", "--set", "grid.nfe=\"many\""],
        &["sample", "--set", "no_such_section.x=1"],
        &["--config", "/nonexistent/recfg.toml", "sample"],
        &["not-a-command"],
    ] {
        let out = recfg(dir.path(), args);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn simulate_is_reproducible_across_runs_and_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "1"), (&c, "4")] {
        let mut args = vec!["--workers", workers, "simulate"];
        args.extend(SMALL);
        let out = recfg(dir.path(), &args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let first = read_tree(a.path());
    assert!(first.keys().any(|p| p.ends_with("figure1_gamma_1.5.csv")));
    assert_eq!(first, read_tree(b.path()), "same seed, same bytes");
    assert_eq!(
        first,
        read_tree(c.path()),
        "worker count does not change output"
    );
}

#[test]
fn plot_data_collects_simulation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate"];
    args.extend(SMALL);
    assert_eq!(recfg(dir.path(), &args).status.code(), Some(0));
    let out = recfg(dir.path(), &["plot-data"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("plot-data/manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(manifest.to_string().contains("figure1.csv"));
    let text = fs::read_to_string(dir.path().join("plot-data/figure1.csv")).unwrap();
    assert!(text.contains("ground_truth"));
}

#[test]
fn sample_writes_batch_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = recfg(
        dir.path(),
        &[
            "sample",
            "--set",
            "grid.nfe=32",
            "--set",
            "sampling.batch=500",
            "--set",
            "guidance.mode=\"cfg\"",
            "--set",
            "guidance.gamma1=[2.0]",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let samples = fs::read_to_string(dir.path().join("sample/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 501);
}

#[test]
fn quick_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = recfg(dir.path(), &["verify", "--set", "verify.scale=\"quick\""]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().all(|l| !l.starts_with("FAIL")));
    assert!(dir.path().join("verify/verify_report.json").exists());
}
