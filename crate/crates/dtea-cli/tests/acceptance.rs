//! Acceptance criteria, one test per criterion. Each test enforces its
//! own wall-clock budget alongside the functional assertion, so this
//! target both validates the build and documents the performance
//! envelope. Run with `cargo test --test acceptance`.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dtea_core::selfcheck::{
    conv_suite, entropy_suite, epg_grad_suite, knn_suite, permutation_suite, pipeline_grad_suite,
    str_grad_suite, structure_suite, SuiteReport, Tolerances, CONV_CASES, ENTROPY_CASES,
    GRAD_COORDS, KNN_CASES, PERMUTATION_CASES, STRUCTURE_CASES,
};

fn assert_suite(report: &SuiteReport, expected_cases: usize) {
    assert!(
        report.cases >= expected_cases,
        "{}: only {} of {} cases ran",
        report.name,
        report.cases,
        expected_cases
    );
    assert!(
        report.passed(),
        "{}: {} failures, first: {}",
        report.name,
        report.failures.len(),
        report.failures.first().map_or("", String::as_str)
    );
}

fn assert_budget(elapsed: Duration, budget: Duration, what: &str) {
    assert!(
        elapsed <= budget,
        "{what} took {elapsed:?}, budget {budget:?}"
    );
}

fn dtea(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtea"));
    cmd.args(args).env_remove("DTEA_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary should spawn");
    assert_eq!(
        out.status.code(),
        Some(0),
        "dtea {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn default_cfg() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/default.cfg")
        .to_string_lossy()
        .into_owned()
}

fn manifest_value(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Criterion 1: neighbor selection matches the brute-force oracle exactly
/// on 200 random node sets (n <= 64, D <= 16, k <= 8, d <= 3). Budget 5 s.
#[test]
fn acceptance_01_knn_matches_bruteforce_exactly() {
    let start = Instant::now();
    let report = knn_suite(KNN_CASES, 0xACC0_0001);
    let elapsed = start.elapsed();
    assert_suite(&report, KNN_CASES);
    assert_budget(elapsed, Duration::from_secs(5), "knn suite");
    println!("[PASS] criterion 1 — {} ({elapsed:?})", report.summary_line());
}

/// Criterion 2: channel entropy within relative 1e-5 of the naive oracle
/// and bottom-K selection exactly equal, on 100 random tensors
/// (C <= 16, sides <= 9). Budget 5 s.
#[test]
fn acceptance_02_entropy_and_selection_match_naive() {
    let start = Instant::now();
    let report = entropy_suite(ENTROPY_CASES, 0xACC0_0002, &Tolerances::default());
    let elapsed = start.elapsed();
    assert_suite(&report, ENTROPY_CASES);
    assert_budget(elapsed, Duration::from_secs(5), "entropy suite");
    println!("[PASS] criterion 2 — {} ({elapsed:?})", report.summary_line());
}

/// Criterion 3: convolution within relative 1e-6 (64-bit) / 1e-4 (32-bit)
/// of the quadruple-loop oracle on 50 random geometries. Budget 10 s.
#[test]
fn acceptance_03_convolution_matches_naive() {
    let start = Instant::now();
    let report = conv_suite(CONV_CASES, 0xACC0_0003, &Tolerances::default());
    let elapsed = start.elapsed();
    assert_suite(&report, CONV_CASES);
    assert_budget(elapsed, Duration::from_secs(10), "conv suite");
    println!("[PASS] criterion 3 — {} ({elapsed:?})", report.summary_line());
}

/// Criterion 4: analytic gradients match central finite differences in
/// 64-bit on the tiny preset — relative 1e-6 for the topology and gating
/// modules, 1e-5 end to end — over >= 20 coordinates each, skipping
/// selection flips. Budget 120 s for all three checks.
#[test]
fn acceptance_04_gradients_match_finite_differences() {
    let tol = Tolerances::default();
    let start = Instant::now();
    let str_report = str_grad_suite(GRAD_COORDS, 0xACC0_0004, &tol);
    let epg_report = epg_grad_suite(GRAD_COORDS, 0xACC0_0005, &tol);
    let pipe_report = pipeline_grad_suite(0xACC0_0006, &tol);
    let elapsed = start.elapsed();
    for report in [&str_report, &epg_report, &pipe_report] {
        assert_suite(report, GRAD_COORDS);
        println!("[PASS] criterion 4 — {}", report.summary_line());
    }
    assert_budget(elapsed, Duration::from_secs(120), "gradient checks");
    println!("[PASS] criterion 4 — all gradient checks ({elapsed:?})");
}

/// Criterion 5: the default configuration derives the documented
/// quantities — Cs=32, C=128, H_t=W_t=7 at 224x224, mu=3.99, K=64 —
/// verified through the manifest a real run writes. Budget 5 s.
#[test]
fn acceptance_05_default_config_conformance_via_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let start = Instant::now();
    dtea(
        &[
            "run",
            "--config",
            &default_cfg(),
            "--synthetic",
            "0",
            "--out",
            &out_dir.to_string_lossy(),
        ],
        &[("DTEA_THREADS", "1")],
    );
    let elapsed = start.elapsed();
    let manifest = manifest_value(&out_dir);
    assert_eq!(manifest["config"]["Cs"], 32);
    assert_eq!(manifest["config"]["mu"], 3.99);
    assert_eq!(manifest["config"]["K"], 64);
    assert_eq!(manifest["config"]["H"], 224);
    assert_eq!(manifest["config"]["W"], 224);
    assert_eq!(manifest["derived"]["C"], 128);
    assert_eq!(manifest["derived"]["H_t"], 7);
    assert_eq!(manifest["derived"]["W_t"], 7);
    assert_eq!(manifest["derived"]["n_nodes"], 49);
    assert_budget(elapsed, Duration::from_secs(5), "default-config run");
    println!("[PASS] criterion 5 — default config derives C=128, 7x7 grid, mu=3.99, K=64 ({elapsed:?})");
}

/// Criterion 6: structural invariants on 50 random configurations —
/// hypergraph arity and index validity, mixed features and gates inside
/// (0,1), gating only attenuates, restored shapes match the declared
/// stage geometry. Budget 30 s.
#[test]
fn acceptance_06_structural_invariants_hold() {
    let start = Instant::now();
    let report = structure_suite(STRUCTURE_CASES, 0xACC0_0007);
    let elapsed = start.elapsed();
    assert_suite(&report, STRUCTURE_CASES);
    assert_budget(elapsed, Duration::from_secs(30), "structure suite");
    println!("[PASS] criterion 6 — {} ({elapsed:?})", report.summary_line());
}

/// Criterion 7: seed-42 runs are bit-identical — across repeated runs and
/// across DTEA_THREADS=1 vs DTEA_THREADS=8. Tensor files and the
/// standalone JSON documents are compared byte for byte; manifests are
/// compared structurally with the wall-clock timings section excluded,
/// since timing is the one field that measures the run instead of
/// describing it. Budget 30 s.
#[test]
fn acceptance_07_runs_are_bit_identical_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let dirs = ["a", "b", "threads8"];
    let threads = ["1", "1", "8"];
    for (name, n) in dirs.iter().zip(threads) {
        dtea(
            &[
                "run",
                "--config",
                &default_cfg(),
                "--synthetic",
                "42",
                "--out",
                &dir.path().join(name).to_string_lossy(),
            ],
            &[("DTEA_THREADS", n)],
        );
    }
    let elapsed = start.elapsed();

    let files = [
        "stage_1.dtt",
        "stage_2.dtt",
        "stage_3.dtt",
        "stage_4.dtt",
        "hypergraph.json",
        "entropy.json",
    ];
    let reference = dir.path().join(dirs[0]);
    for other in &dirs[1..] {
        for file in files {
            assert_eq!(
                std::fs::read(reference.join(file)).unwrap(),
                std::fs::read(dir.path().join(other).join(file)).unwrap(),
                "{file} differs between runs {0} and {other}",
                dirs[0]
            );
        }
        let mut a = manifest_value(&reference);
        let mut b = manifest_value(&dir.path().join(other));
        a["timings_ms"] = serde_json::Value::Null;
        b["timings_ms"] = serde_json::Value::Null;
        assert_eq!(a, b, "manifests differ between runs {} and {other}", dirs[0]);
    }
    assert_budget(elapsed, Duration::from_secs(30), "determinism runs");
    println!("[PASS] criterion 7 — 3 runs bit-identical across thread counts ({elapsed:?})");
}

/// Criterion 8: permuting input channels permutes the 64-bit entropy
/// scores exactly and maps the selected set through the same permutation,
/// over 20 random permutations. Budget 10 s.
#[test]
fn acceptance_08_channel_permutation_equivariance() {
    let start = Instant::now();
    let report = permutation_suite(PERMUTATION_CASES, 0xACC0_0008);
    let elapsed = start.elapsed();
    assert_suite(&report, PERMUTATION_CASES);
    assert_budget(elapsed, Duration::from_secs(10), "permutation suite");
    println!("[PASS] criterion 8 — {} ({elapsed:?})", report.summary_line());
}

/// Criterion 9: the default-configuration forward pass (C=128, 7x7 node
/// grid, k=8) has a median under 100 ms on a single thread, measured by
/// the benchmark command over 50 repetitions.
#[test]
fn acceptance_09_default_forward_meets_latency_budget() {
    let out = dtea(
        &["bench", "--config", &default_cfg(), "--reps", "50"],
        &[("DTEA_THREADS", "1")],
    );
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["reps"], 50);
    for stage in ["preproc", "topology", "gating", "postproc", "total"] {
        assert!(
            doc["stages"][stage]["median_ms"].is_f64(),
            "missing stage {stage}"
        );
    }
    let median = doc["stages"]["total"]["median_ms"].as_f64().unwrap();
    assert!(
        median < 100.0,
        "median forward {median:.2} ms exceeds the 100 ms budget"
    );
    println!("[PASS] criterion 9 — median forward {median:.2} ms < 100 ms over 50 reps");
}
