use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn hzp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hzp")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Parses CSV output into (header, rows of fields).
fn table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().expect("header row");
    (header, lines.collect())
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn plan_lists_the_reference_row() {
    let cfg = config("dense36b.toml");
    let out = hzp(&["plan", cfg.to_str().unwrap(), "--budget", "400000000000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = table(&stdout(&out));
    assert_eq!(header.join(","), "z1,z2,z3,pp,cp,static_bytes,spans_nodes_z2,spans_nodes_z3,comm_cost_estimate");
    let row = rows.iter().find(|r| r[..3] == ["64", "8", "8"]).expect("row z1=64 z2=8 z3=8");
    // 12N/64 + 4N/8 + 2N/8 with N = 36e9
    assert_eq!(row[column(&header, "static_bytes")], "33750000000");
    assert_eq!(row[column(&header, "pp")], "4");
    assert_eq!(row[column(&header, "cp")], "8");
}

#[test]
fn plan_exit_codes() {
    let cfg = config("dense36b.toml");
    assert_eq!(code(&hzp(&["plan", cfg.to_str().unwrap(), "--budget", "1000"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nname = 3\n").unwrap();
    let out = hzp(&["plan", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());

    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&hzp(&["plan", missing.to_str().unwrap()])), 1);

    let text = std::fs::read_to_string(config("small.toml")).unwrap().replace("dp = 4", "dp = 3");
    let invalid = dir.path().join("invalid.toml");
    std::fs::write(&invalid, text).unwrap();
    assert_eq!(code(&hzp(&["plan", invalid.to_str().unwrap()])), 1);
    assert_eq!(code(&hzp(&["plan"])), 1);
}

fn simulate(extra: &[&str], trace: &Path) -> (Vec<String>, Vec<String>, Value) {
    let cfg = config("small.toml");
    let mut args = vec!["simulate", cfg.to_str().unwrap(), "--trace", trace.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = hzp(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (header, mut rows) = table(&stdout(&out));
    assert_eq!(rows.len(), 1);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(trace).unwrap()).unwrap();
    (header, rows.remove(0), json)
}

fn count_events(trace: &Value, name: &str) -> usize {
    trace.as_array().unwrap().iter().filter(|e| e["ph"] == "X" && e["name"] == name).count()
}

#[test]
fn paired_simulations_favor_async() {
    let dir = tempfile::tempdir().unwrap();
    let (h, vanilla, vt) = simulate(&["--mode", "vanilla"], &dir.path().join("v.json"));
    let (_, asynch, at) = simulate(&["--mode", "async"], &dir.path().join("a.json"));
    let idle = column(&h, "compute_idle_s");
    let busy = column(&h, "compute_busy_s");
    let v: f64 = vanilla[idle].parse().unwrap();
    let a: f64 = asynch[idle].parse().unwrap();
    assert!(a <= v, "async idle {a} > vanilla idle {v}");
    assert_eq!(vanilla[busy], asynch[busy]);
    // same task graph in both modes
    let tasks = |t: &Value| t.as_array().unwrap().iter().filter(|e| e["ph"] == "X").count();
    assert_eq!(tasks(&vt), tasks(&at));
}

#[test]
fn recompute_keeps_all_gather_count() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, off) = simulate(&[], &dir.path().join("off.json"));
    let (_, _, on) = simulate(&["--recompute"], &dir.path().join("on.json"));
    assert!(count_events(&off, "AG-param") > 0);
    assert_eq!(count_events(&off, "AG-param"), count_events(&on, "AG-param"));
    assert_eq!(count_events(&off, "FWD-recompute"), 0);
    assert_eq!(count_events(&on, "FWD-recompute"), count_events(&on, "BWD"));
}

#[test]
fn trace_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, trace) = simulate(&["--reuse", "all"], &dir.path().join("t.json"));
    for e in trace.as_array().unwrap() {
        let ph = e["ph"].as_str().expect("every event has a phase");
        assert!(["M", "X", "C"].contains(&ph));
        assert!(e["pid"].is_u64());
        if ph == "X" {
            assert!(e["ts"].as_f64().unwrap() >= 0.0);
            assert!(e["dur"].as_f64().unwrap() >= 0.0);
            assert!(e["tid"].is_u64());
        }
    }
}

#[test]
fn reuse_flags_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (h, none, _) = simulate(&[], &dir.path().join("a.json"));
    let (_, all, _) = simulate(&["--reuse", "r1,r2,r3"], &dir.path().join("b.json"));
    let ag = column(&h, "ag_param_tasks");
    let elim = column(&h, "eliminated_ag");
    let before: u64 = none[ag].parse().unwrap();
    let after: u64 = all[ag].parse().unwrap();
    let eliminated: u64 = all[elim].parse().unwrap();
    assert!(eliminated > 0);
    assert_eq!(before - after, eliminated);

    let cfg = config("small.toml");
    assert_eq!(code(&hzp(&["simulate", cfg.to_str().unwrap(), "--reuse", "r9"])), 1);
    assert_eq!(code(&hzp(&["simulate", cfg.to_str().unwrap(), "--mode", "fast"])), 1);
}

#[test]
fn verify_exit_codes_and_report() {
    let cfg = config("small.toml");
    let cfg = cfg.to_str().unwrap();
    let out = hzp(&["verify", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["precision"], "fp64");
    assert_eq!(report["pass"], true);
    let cases = report["cases"].as_array().unwrap();
    // dp in {1, 2, 4}: 1 + 8 + 27 divisor triples, two micro-batch counts each
    assert_eq!(cases.len(), 72);
    for c in cases {
        assert_eq!(c["max_abs_diff"], 0.0);
        assert!(c["rel_diff"].is_f64());
        assert_eq!(c["pass"], true);
    }

    assert_eq!(code(&hzp(&["verify", cfg, "--precision", "mixed", "--steps", "2"])), 0);
    assert_eq!(code(&hzp(&["verify", cfg, "--steps", "0"])), 0);
    let out = hzp(&["verify", cfg, "--inject-fault"]);
    assert_eq!(code(&out), 3);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], false);
    assert_eq!(code(&hzp(&["verify", cfg, "--precision", "fp16"])), 1);
}

#[test]
fn sweep_scales_tp_only() {
    let cfg = config("dense36b.toml");
    let cfg = cfg.to_str().unwrap();
    let out = hzp(&["sweep", cfg, "--seq-lens", "8K,32K,128K", "--tp", "8"]);
    assert_eq!(code(&out), 0);
    let (header, rows) = table(&stdout(&out));
    assert_eq!(header.join(","), "seq_len,tp_bytes,hzp_bytes");
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["8192", "32768", "131072"]);
    let tp: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(tp[1], 4.0 * tp[0]);
    assert_eq!(tp[2], 16.0 * tp[0]);
    assert!(rows.iter().all(|r| r[2] == rows[0][2]));

    let (_, rows) = table(&stdout(&hzp(&["sweep", cfg, "--seq-lens", "4096"])));
    assert_eq!(rows.len(), 1);
    // the config has tp = 1
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);

    assert_eq!(code(&hzp(&["sweep", cfg, "--seq-lens", "8Q"])), 1);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let small = config("small.toml");
    let dense36b = config("dense36b.toml");
    let runs: Vec<Vec<&str>> = vec![
        vec!["plan", dense36b.to_str().unwrap(), "--budget", "400000000000"],
        vec!["simulate", small.to_str().unwrap(), "--mode", "vanilla", "--reuse", "all"],
        vec!["simulate", small.to_str().unwrap(), "--mode", "async", "--recompute"],
        vec!["verify", small.to_str().unwrap(), "--precision", "mixed"],
        vec!["sweep", dense36b.to_str().unwrap(), "--tp", "8"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut files = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{i}-{run}.out"));
            let trace = dir.path().join(format!("{i}-{run}.json"));
            let mut a = args.clone();
            a.extend(["--out", out.to_str().unwrap()]);
            if args[0] == "simulate" {
                a.extend(["--trace", trace.to_str().unwrap()]);
            }
            assert_eq!(code(&hzp(&a)), 0, "{a:?}");
            let mut bytes = std::fs::read(&out).unwrap();
            if args[0] == "simulate" {
                bytes.extend(std::fs::read(&trace).unwrap());
            }
            files.push(bytes);
        }
        assert!(!files[0].is_empty());
        assert_eq!(files[0], files[1], "{args:?}");
    }
}
