use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ppdem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppdem"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn metric(dir: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .find_map(|l| {
            let mut f = l.split(',');
            (f.next() == Some(name)).then(|| f.next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("metric {name} missing"))
}

#[test]
fn gen_data_writes_the_wide_table_deterministically() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "gen-data",
        "--preset",
        "wind-like",
        "--farms",
        "9",
        "--hours",
        "480",
        "--seed",
        "1",
    ];
    assert_eq!(
        code(&ppdem(tmp.path(), &[&args[..], &["--out", "a"]].concat())),
        0
    );
    assert_eq!(
        code(&ppdem(tmp.path(), &[&args[..], &["--out", "b"]].concat())),
        0
    );
    let csv = fs::read_to_string(tmp.path().join("a/data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 481);
    assert!(csv.lines().all(|l| l.split(',').count() == 19));
    for f in ["data.csv", "manifest.json", "truth.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn gen_data_with_no_hours_writes_only_the_header() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(tmp.path(), &["gen-data", "--hours", "0", "--out", "z"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(tmp.path().join("z/data.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn exact_fit_matches_the_centralized_benchmark_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "fit",
        "--out",
        "f",
        "--kld-samples",
        "1000",
        "--select-j",
        "1..6",
    ];
    let out = ppdem(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("f");
    assert!(metric(&dir, "marginal_cdf_rse_max") < 1e-10);
    assert_eq!(metric(&dir, "distributed/nodes_agree"), 1.0);

    let bic = fs::read_to_string(dir.join("bic.csv")).unwrap();
    let chosen: Vec<&str> = bic.lines().filter(|l| l.ends_with(",true")).collect();
    assert_eq!(chosen.len(), 1);
    assert_eq!(bic.lines().count(), 7);
    assert_eq!(
        metric(&dir, "components"),
        chosen[0].split(',').next().unwrap().parse::<f64>().unwrap()
    );

    let curves = fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("x,value,series,node"));

    let first = fs::read(dir.join("result.json")).unwrap();
    assert_eq!(code(&ppdem(tmp.path(), &args)), 0);
    assert_eq!(fs::read(dir.join("result.json")).unwrap(), first);
}

#[test]
fn conditional_curves_agree_and_bad_forecasts_exit_four() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "fit",
            "--out",
            "f",
            "--hours",
            "240",
            "--kld-samples",
            "1000",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = ppdem(
        tmp.path(),
        &[
            "conditional",
            "--bundle",
            "f/result.json",
            "--at-row",
            "120",
            "--nodes",
            "1,3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rse = fs::read_to_string(tmp.path().join("f/conditional_rse.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rse
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        vec![1.0, 3.0]
    );
    assert!(rows.iter().all(|r| r[2] < 1e-10));

    let short = ppdem(
        tmp.path(),
        &[
            "conditional",
            "--bundle",
            "f/result.json",
            "--y0",
            "0.5,0.5",
        ],
    );
    assert_eq!(code(&short), 4);
    assert!(stderr(&short).contains("dimension"));
    let junk = ppdem(
        tmp.path(),
        &[
            "conditional",
            "--bundle",
            "f/result.json",
            "--y0",
            "0.5,abc",
        ],
    );
    assert_eq!(code(&junk), 4);
}

#[test]
fn failure_sweep_tags_disconnecting_cuts() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("kite.json"),
        r#"{"nodes": 4, "edges": [[0,1],[1,2],[2,0],[2,3]]}"#,
    )
    .unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "failure-sweep",
            "--out",
            "s",
            "--farms",
            "4",
            "--hours",
            "120",
            "-j",
            "2",
            "--topology",
            "kite.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("disconnects"));
    let sweep = fs::read_to_string(tmp.path().join("s/sweep.csv")).unwrap();
    let status: Vec<(&str, &str)> = sweep
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(
        status,
        vec![
            ("none", "baseline"),
            ("1-2", "ok"),
            ("1-3", "ok"),
            ("2-3", "ok"),
            ("3-4", "disconnected")
        ]
    );
}

#[test]
fn failure_sweep_with_no_cuts_reports_only_the_baseline() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "failure-sweep",
            "--out",
            "s",
            "--hours",
            "120",
            "-j",
            "2",
            "--edges",
            "",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sweep = fs::read_to_string(tmp.path().join("s/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2);
    assert!(sweep
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("none,baseline,0e0,0e0,"));
}

#[test]
fn exit_codes_distinguish_usage_and_non_convergence() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        code(&ppdem(
            tmp.path(),
            &["fit", "--out", "x", "--mode", "pigeon"]
        )),
        1
    );
    assert_eq!(
        code(&ppdem(
            tmp.path(),
            &["fit", "--out", "x", "--init", "pigeon"]
        )),
        1
    );
    let stalled = ppdem(
        tmp.path(),
        &[
            "fit",
            "--out",
            "x",
            "--max-iterations",
            "1",
            "--tolerance",
            "1e-15",
            "--kld-samples",
            "100",
        ],
    );
    assert_eq!(code(&stalled), 2, "{}", stderr(&stalled));
    assert!(tmp.path().join("x/result.json").exists());
}

#[test]
fn spec_files_are_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("spec.json"),
        r#"{"data": {"kind": "preset", "name": "wind-like", "farms": 4, "hours": 50, "seed": 3},
            "em": {"components": 2}, "output": "from-spec"}"#,
    )
    .unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "fit",
            "--spec",
            "spec.json",
            "--hours",
            "60",
            "--kld-samples",
            "100",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("from-spec/result.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(bundle["rows"], 60);
    assert_eq!(bundle["farms"], 4);
    assert_eq!(bundle["spec"]["em"]["components"], 2);
}

#[test]
fn full_protocol_fit_reports_inner_product_error_and_a_clean_audit() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "fit",
            "--out",
            "p",
            "--mode",
            "full-protocol",
            "--farms",
            "4",
            "--hours",
            "120",
            "-j",
            "2",
            "--kld-samples",
            "1000",
            "--transcript",
            "p.ndjson",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("p");
    assert!(metric(&dir, "inner_product_mean_relative_error") < 1e-2);
    assert_eq!(metric(&dir, "privacy/clean"), 1.0);
    assert_eq!(metric(&dir, "kld_max_between_nodes"), 0.0);
    let transcript = fs::read_to_string(tmp.path().join("p.ndjson")).unwrap();
    assert_eq!(transcript.lines().count() as f64, metric(&dir, "messages"));
}

#[test]
fn sum_bench_trace_converges_to_the_true_sum() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(tmp.path(), &["sum-bench", "--out", "b"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = fs::read_to_string(tmp.path().join("b/sum_trace.csv")).unwrap();
    let errors: Vec<(f64, f64)> = trace
        .lines()
        .filter(|l| l.contains(",abs_error,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    let last = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    assert!(last <= 60.0);
    assert!(errors.iter().filter(|e| e.0 == last).all(|e| e.1 <= 1e-9));
    assert!(errors.iter().filter(|e| e.0 == 1.0).any(|e| e.1 > 1e-3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay gap 0.0e0"));
}

#[test]
fn inner_product_bench_error_shrinks_with_hash_length() {
    let tmp = TempDir::new().unwrap();
    let out = ppdem(
        tmp.path(),
        &[
            "inner-product-bench",
            "--out",
            "b",
            "--seeds",
            "2",
            "--max-exponent",
            "13",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(tmp.path().join("b/inner_product.csv")).unwrap();
    let mean: Vec<f64> = text
        .lines()
        .filter(|l| l.ends_with(",mean,"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(mean.len(), 7);
    assert!(mean[6] < mean[0]);
}
