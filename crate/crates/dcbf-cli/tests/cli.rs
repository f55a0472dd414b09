//! Harness-level acceptance checks: byte-identical reruns, exit codes, CSV
//! schemas, and an independent recomputation of the emitted summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dcbf")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dcbf-cli-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dcbf")
}

fn produced_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            files.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
    files
}

#[test]
fn acceptance_10_determinism_byte_identical_reruns() {
    let started = std::time::Instant::now();
    let cases: &[(&str, &[&str])] = &[
        ("factory-check", &["factory-check", "--iters", "500", "--seed", "3"]),
        (
            "overhead-balanced",
            &["overhead-balanced", "--ell", "2", "--iters", "500", "--seed", "3"],
        ),
        (
            "overhead-scaling",
            &["overhead-scaling", "--n", "16", "--iters", "300", "--seed", "3"],
        ),
        (
            "vanilla-blowup",
            &["vanilla-blowup", "--n", "10", "--iters", "500", "--seed", "3"],
        ),
        ("diffusion", &["diffusion", "--n", "16", "--iters", "300", "--seed", "7"]),
        (
            "cox",
            &["cox", "--n", "64", "--iters", "150", "--seed", "7", "--sampler", "cgs"],
        ),
    ];
    let mut pass = true;
    for (tag, args) in cases {
        let dir_a = workdir(&format!("{tag}-a"));
        let dir_b = workdir(&format!("{tag}-b"));
        let out_a = run_in(&dir_a, args);
        let out_b = run_in(&dir_b, args);
        assert!(out_a.status.success(), "{tag}: {:?}", out_a);
        assert!(out_b.status.success(), "{tag}: {:?}", out_b);
        let files_a = produced_files(&dir_a);
        let files_b = produced_files(&dir_b);
        assert!(!files_a.is_empty(), "{tag} produced no files");
        if files_a != files_b {
            pass = false;
            eprintln!("{tag}: reruns differ");
        }
        let _ = std::fs::remove_dir_all(dir_a);
        let _ = std::fs::remove_dir_all(dir_b);
    }
    println!(
        "ACCEPTANCE 10 determinism: {} (byte-identical reruns across all experiments; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(pass);
}

#[test]
fn overhead_balanced_summary_near_sixty_four() {
    let dir = workdir("ob64");
    let out = run_in(
        &dir,
        &["overhead-balanced", "--ell", "3", "--iters", "8000", "--seed", "2"],
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.join("overhead-balanced_summary.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    let omega: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((omega - 64.0).abs() < 2.5, "omega {omega}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unknown_experiment_exits_two_with_usage() {
    let dir = workdir("unknown");
    let out = run_in(&dir, &["not-an-experiment"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("possible values"), "usage text missing: {stderr}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn rejection_cap_abort_exits_three_with_diagnostic() {
    // A dataset with a huge observation gap drives the bridge rejection
    // sampler past its cap.
    let dir = workdir("abort");
    std::fs::write(dir.join("bad.csv"), "t,x\n0,0\n0.25,0\n50,0\n").unwrap();
    let out = run_in(
        &dir,
        &["diffusion", "--data", "bad.csv", "--iters", "50", "--seed", "1"],
    );
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("abort"), "diagnostic missing: {stderr}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn config_file_overrides_flags() {
    let dir = workdir("config");
    std::fs::write(dir.join("run.conf"), "seed=5\niters=200\n").unwrap();
    // Flag says seed 9; the config file wins.
    let out = run_in(
        &dir,
        &[
            "factory-check",
            "--seed",
            "9",
            "--iters",
            "9999",
            "--config",
            "run.conf",
            "--out",
            "a",
        ],
    );
    assert!(out.status.success());
    let direct = run_in(
        &dir,
        &["factory-check", "--seed", "5", "--iters", "200", "--out", "b"],
    );
    assert!(direct.status.success());
    let a = std::fs::read(dir.join("a_trace.csv")).unwrap();
    let b = std::fs::read(dir.join("b_trace.csv")).unwrap();
    assert_eq!(a, b);
    let _ = std::fs::remove_dir_all(dir);
}

/// Trace row fields needed for the recomputation.
struct Row {
    params: Vec<f64>,
    leaf_outputs: u64,
    leaf_loops: u64,
    time_ns: u64,
}

fn parse_trace(text: &str) -> (usize, Vec<Row>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let cols: Vec<&str> = header.split(',').collect();
    assert_eq!(cols[0], "iter");
    let params = cols.len() - 6;
    for (k, name) in cols[1..1 + params].iter().enumerate() {
        assert_eq!(*name, format!("theta_{}", k + 1));
    }
    assert_eq!(
        &cols[1 + params..],
        &["outcome", "leaf_outputs", "leaf_loops", "merge_loops", "time_ns"]
    );
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            assert!(["heads", "tails", "escaped"].contains(&f[1 + params]));
            Row {
                params: f[1..1 + params].iter().map(|v| v.parse().unwrap()).collect(),
                leaf_outputs: f[2 + params].parse().unwrap(),
                leaf_loops: f[3 + params].parse().unwrap(),
                time_ns: f[5 + params].parse().unwrap(),
            }
        })
        .collect();
    (params, rows)
}

fn recompute_acf(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let ck: f64 = series[..n - lag]
        .iter()
        .zip(&series[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / n as f64;
    ck / c0
}

fn recompute_ess(series: &[f64]) -> f64 {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let auto = |lag: usize| -> f64 {
        if lag >= n {
            return 0.0;
        }
        series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut m = 0usize;
    loop {
        let gamma = auto(2 * m) + auto(2 * m + 1);
        if gamma <= 0.0 || 2 * m + 1 >= n {
            break;
        }
        tau += 2.0 * gamma;
        m += 1;
    }
    n as f64 / tau.max(1e-12)
}

#[test]
fn summary_recomputed_from_trace_matches_exactly() {
    // Cox exercises the two-parameter schema and a root-flip count above
    // one; diffusion exercises the single-parameter schema.
    for (tag, args, flips_per_iter) in [
        (
            "diffusion",
            vec!["diffusion", "--n", "16", "--iters", "400", "--seed", "7"],
            1u64,
        ),
        (
            "cox",
            vec!["cox", "--n", "64", "--iters", "200", "--seed", "7"],
            2u64,
        ),
    ] {
        let dir = workdir(&format!("recompute-{tag}"));
        let out = run_in(&dir, &args.iter().map(|s| &**s).collect::<Vec<_>>());
        assert!(out.status.success(), "{out:?}");
        let trace_text =
            std::fs::read_to_string(dir.join(format!("{tag}_trace.csv"))).unwrap();
        let (params, rows) = parse_trace(&trace_text);
        let summary_text =
            std::fs::read_to_string(dir.join(format!("{tag}_summary.csv"))).unwrap();
        let mut lines = summary_text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns"
        );
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();

        let iters = rows.len() as f64;
        let flips = iters * flips_per_iter as f64;
        let leaf_outputs: u64 = rows.iter().map(|r| r.leaf_outputs).sum();
        let leaf_loops: u64 = rows.iter().map(|r| r.leaf_loops).sum();
        let series: Vec<f64> = rows.iter().map(|r| r.params[params - 1]).collect();
        let expect = [
            (leaf_outputs as f64 / flips).to_string(),
            (leaf_loops as f64 / flips).to_string(),
            recompute_acf(&series, 1).to_string(),
            recompute_acf(&series, 4).to_string(),
            recompute_acf(&series, 16).to_string(),
            recompute_ess(&series).to_string(),
            (rows.last().unwrap().time_ns as f64 / iters).to_string(),
        ];
        assert_eq!(&fields[2..], &expect, "{tag} summary mismatch");
        let _ = std::fs::remove_dir_all(dir);
    }
}
