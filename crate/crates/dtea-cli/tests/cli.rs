//! End-to-end checks of the `dtea` binary: exit codes, artifact layout,
//! replay, document validation, and benchmark output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtea_core::io::save_feature_map;
use dtea_core::pipeline::{Pipeline, PipelineConfig};
use dtea_core::tensor::FeatureMap;

fn dtea(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtea"));
    cmd.args(args).env_remove("DTEA_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}

fn tiny_cfg() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/tiny.cfg")
        .to_string_lossy()
        .into_owned()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const ARTIFACTS: [&str; 7] = [
    "stage_1.dtt",
    "stage_2.dtt",
    "stage_3.dtt",
    "stage_4.dtt",
    "hypergraph.json",
    "entropy.json",
    "manifest.json",
];

fn run_tiny_synthetic(out_dir: &Path) {
    let out = dtea(
        &[
            "run",
            "--config",
            &tiny_cfg(),
            "--synthetic",
            "42",
            "--out",
            &out_dir.to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));
}

#[test]
fn run_writes_all_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny_synthetic(&dir.path().join("out"));
    for file in ARTIFACTS {
        assert!(dir.path().join("out").join(file).exists(), "{file} missing");
    }
}

#[test]
fn replay_reproduces_bit_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    run_tiny_synthetic(&first);

    let out = dtea(
        &[
            "run",
            "--replay",
            &first.join("manifest.json").to_string_lossy(),
            "--out",
            &second.to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));

    // Tensors and standalone documents must match byte for byte. The
    // manifest is compared structurally because its timings section
    // records wall-clock time.
    for file in &ARTIFACTS[..6] {
        assert_eq!(
            std::fs::read(first.join(file)).unwrap(),
            std::fs::read(second.join(file)).unwrap(),
            "{file} differs under replay"
        );
    }
    let mut a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap())
            .unwrap();
    let mut b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(second.join("manifest.json")).unwrap())
            .unwrap();
    a["timings_ms"] = serde_json::Value::Null;
    b["timings_ms"] = serde_json::Value::Null;
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "H = 64\nQ = 3\n").unwrap();
    let out = dtea(
        &[
            "run",
            "--config",
            &cfg.to_string_lossy(),
            "--synthetic",
            "1",
            "--out",
            &dir.path().join("out").to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_text(&out).contains("unknown key"));
}

#[test]
fn invalid_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    // 100 is not a multiple of 32.
    std::fs::write(&cfg, "H = 100\n").unwrap();
    let out = dtea(
        &[
            "run",
            "--config",
            &cfg.to_string_lossy(),
            "--synthetic",
            "1",
            "--out",
            &dir.path().join("out").to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_stage_file_exits_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let stage = |i: usize| {
        dir.path()
            .join(format!("nowhere_{i}.dtt"))
            .to_string_lossy()
            .into_owned()
    };
    let out = dtea(
        &[
            "run",
            "--config",
            &tiny_cfg(),
            "--stage-1",
            &stage(1),
            "--stage-2",
            &stage(2),
            "--stage-3",
            &stage(3),
            "--stage-4",
            &stage(4),
            "--out",
            &dir.path().join("out").to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_text(&out).contains("nowhere_1.dtt"));
}

#[test]
fn non_finite_stage_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    let dims = cfg.stage_dims();
    let channels = [cfg.c1, cfg.c2, cfg.c3, cfg.c4];
    let mut paths: Vec<PathBuf> = Vec::new();
    for i in 0..4 {
        let mut map = FeatureMap::<f32>::zeros(channels[i], dims[i].0, dims[i].1);
        if i == 0 {
            map.data_mut()[0] = f32::NAN;
        }
        let path = dir.path().join(format!("s{}.dtt", i + 1));
        save_feature_map(&map, &path).unwrap();
        paths.push(path);
    }
    let out = dtea(
        &[
            "run",
            "--config",
            &tiny_cfg(),
            "--stage-1",
            &paths[0].to_string_lossy(),
            "--stage-2",
            &paths[1].to_string_lossy(),
            "--stage-3",
            &paths[2].to_string_lossy(),
            "--stage-4",
            &paths[3].to_string_lossy(),
            "--out",
            &dir.path().join("out").to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_text(&out));
}

#[test]
fn file_inputs_match_synthetic_run_bitwise() {
    // Saving the synthetic stage tensors and feeding them back through
    // --stage-N must reproduce the synthetic run exactly (the tensor
    // format is lossless for 32-bit runs).
    let dir = tempfile::tempdir().unwrap();
    let synth_out = dir.path().join("synth");
    run_tiny_synthetic(&synth_out);

    let cfg = PipelineConfig::tiny();
    let pipeline = Pipeline::<f32>::build(cfg).unwrap();
    let inputs = pipeline.synthetic_inputs(42);
    let mut stage_args: Vec<String> = vec!["run".into(), "--config".into(), tiny_cfg()];
    for (i, map) in inputs.iter().enumerate() {
        let path = dir.path().join(format!("in_{}.dtt", i + 1));
        save_feature_map(map, &path).unwrap();
        stage_args.push(format!("--stage-{}", i + 1));
        stage_args.push(path.to_string_lossy().into_owned());
    }
    let file_out = dir.path().join("files");
    stage_args.push("--out".into());
    stage_args.push(file_out.to_string_lossy().into_owned());
    let args: Vec<&str> = stage_args.iter().map(String::as_str).collect();
    let out = dtea(&args, &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));

    for file in &ARTIFACTS[..6] {
        assert_eq!(
            std::fs::read(synth_out.join(file)).unwrap(),
            std::fs::read(file_out.join(file)).unwrap(),
            "{file} differs between synthetic and file-driven runs"
        );
    }
}

#[test]
fn export_hypergraph_emits_validated_document() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("out");
    run_tiny_synthetic(&run_dir);

    let out = dtea(&["export-hypergraph", &run_dir.to_string_lossy()], &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));
    let doc = stdout_json(&out);
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["grid"]["h"], 2);
    assert_eq!(doc["grid"]["w"], 2);
    let edges = doc["hyperedges"].as_array().unwrap();
    assert_eq!(edges.len(), 4);
    for edge in edges {
        assert_eq!(edge["neighbors"].as_array().unwrap().len(), 2);
        let gates = edge["gates"].as_array().unwrap();
        assert_eq!(gates.len(), 2);
        for g in gates {
            let g = g.as_f64().unwrap();
            assert!(g > 0.0 && g < 1.0, "gate {g} escapes (0,1)");
        }
    }
}

#[test]
fn export_commands_exit_two_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().to_string_lossy().into_owned();
    assert_eq!(
        dtea(&["export-hypergraph", &empty], &[]).status.code(),
        Some(2)
    );
    assert_eq!(dtea(&["entropy-report", &empty], &[]).status.code(), Some(2));
}

#[test]
fn entropy_report_scores_carry_both_signs() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("out");
    run_tiny_synthetic(&run_dir);

    let out = dtea(&["entropy-report", &run_dir.to_string_lossy()], &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));
    let doc = stdout_json(&out);
    assert_eq!(doc["K"], 8);
    assert_eq!(doc["mu"], 3.99);
    let literal = doc["scores"].as_array().unwrap();
    let conventional = doc["scores_conventional"].as_array().unwrap();
    assert_eq!(literal.len(), 16);
    assert_eq!(conventional.len(), 16);
    for (a, b) in literal.iter().zip(conventional) {
        let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
        assert!((a + b).abs() <= 1e-9, "{a} and {b} are not negations");
    }
    let selected = doc["selected"].as_array().unwrap();
    assert_eq!(selected.len(), 8);
    let idx: Vec<u64> = selected.iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]), "selection not ascending");
}

#[test]
fn k_equal_one_config_gives_single_neighbor_hyperedges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("k1.cfg");
    std::fs::write(
        &cfg,
        "H = 64\nW = 64\nC1 = 8\nC2 = 12\nC3 = 16\nC4 = 20\nCs = 4\nk = 1\nK = 8\n",
    )
    .unwrap();
    let run_dir = dir.path().join("out");
    let out = dtea(
        &[
            "run",
            "--config",
            &cfg.to_string_lossy(),
            "--synthetic",
            "7",
            "--out",
            &run_dir.to_string_lossy(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));

    let out = dtea(&["export-hypergraph", &run_dir.to_string_lossy()], &[]);
    assert_eq!(out.status.code(), Some(0));
    let doc = stdout_json(&out);
    for edge in doc["hyperedges"].as_array().unwrap() {
        assert_eq!(edge["neighbors"].as_array().unwrap().len(), 1);
        assert_eq!(edge["gates"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn selfcheck_with_zero_tolerance_exits_four_naming_suites() {
    let out = dtea(&["selfcheck", "tiny", "--tolerance-scale", "0"], &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr_text(&out).contains("failing suites"));
    // The per-suite report still lands on stdout before the failure.
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("cases"));
}

#[test]
fn bench_one_rep_reports_equal_median_and_p95() {
    let out = dtea(
        &["bench", "--config", &tiny_cfg(), "--reps", "1"],
        &[("DTEA_THREADS", "1")],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_text(&out));
    let doc = stdout_json(&out);
    assert_eq!(doc["reps"], 1);
    for stage in ["preproc", "topology", "gating", "postproc", "total"] {
        let s = &doc["stages"][stage];
        assert_eq!(s["median_ms"], s["p95_ms"], "{stage} p95 != median");
    }
}

#[test]
fn invalid_thread_env_exits_one() {
    let out = dtea(
        &["bench", "--config", &tiny_cfg(), "--reps", "1"],
        &[("DTEA_THREADS", "many")],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_text(&out).contains("DTEA_THREADS"));
}
