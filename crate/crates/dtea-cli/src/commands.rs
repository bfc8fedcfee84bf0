//! Command implementations. Each command prints its user-visible output
//! (JSON documents or status lines) to stdout and maps every failure to a
//! [`CliError`] so `main` can translate it into the documented exit code.

use std::path::{Path, PathBuf};

use dtea_core::io::{load_feature_map, save_feature_map};
use dtea_core::pipeline::{Pipeline, PipelineConfig, PipelineRun, Precision};
use dtea_core::scalar::Scalar;
use dtea_core::selfcheck::{standard_suites, Tolerances};
use dtea_core::tensor::FeatureMap;

use crate::config::load_config;
use crate::error::{classify_run_error, CliError, CliResult};
use crate::manifest::{
    from_json_file, to_json_file, BenchJson, BenchStages, EntropyJson, GridDims, HypergraphJson,
    InputSpec, RunManifest, StageStats, ENTROPY_FILE, HYPERGRAPH_FILE, MANIFEST_FILE, SCHEMA_VERSION,
    STAGE_FILES,
};

/// Everything `run` needs, resolved from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    pub config: Option<PathBuf>,
    pub synthetic: Option<u64>,
    pub stages: [Option<PathBuf>; 4],
    pub replay: Option<PathBuf>,
    pub out: PathBuf,
}

/// Run the pipeline and write the seven artifacts (four stage tensors,
/// hypergraph JSON, entropy JSON, manifest JSON) into the output directory.
pub fn cmd_run(req: &RunRequest) -> CliResult<()> {
    let (config, input) = resolve_run_source(req)?;
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&req.out).map_err(|e| {
        CliError::Input(format!(
            "cannot create output directory {}: {e}",
            req.out.display()
        ))
    })?;
    match config.precision {
        Precision::F32 => run_and_export::<f32>(&config, &input, &req.out),
        Precision::F64 => run_and_export::<f64>(&config, &input, &req.out),
    }?;
    println!("wrote 7 artifacts to {}", req.out.display());
    Ok(())
}

/// Decide where the configuration and the stage inputs come from:
/// either a fresh `--config` plus one input flavor, or a prior run's
/// manifest via `--replay`.
fn resolve_run_source(req: &RunRequest) -> CliResult<(PipelineConfig, InputSpec)> {
    if let Some(manifest_path) = &req.replay {
        if req.config.is_some() || req.synthetic.is_some() || req.stages.iter().any(Option::is_some)
        {
            return Err(CliError::Config(
                "--replay reconstructs the run from its manifest and cannot be combined with \
                 --config, --synthetic, or --stage-N"
                    .into(),
            ));
        }
        let manifest: RunManifest = from_json_file(manifest_path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "manifest {} has schema_version {}, expected {SCHEMA_VERSION}",
                manifest_path.display(),
                manifest.schema_version
            )));
        }
        return Ok((manifest.config, manifest.input));
    }

    let config_path = req
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("missing --config (or --replay)".into()))?;
    let config = load_config(config_path)?;

    let input = match (req.synthetic, req.stages.iter().any(Option::is_some)) {
        (Some(_), true) => {
            return Err(CliError::Config(
                "--synthetic and --stage-N are mutually exclusive".into(),
            ))
        }
        (Some(seed), false) => InputSpec::Synthetic { seed },
        (None, true) => {
            let mut paths = Vec::with_capacity(4);
            for (i, slot) in req.stages.iter().enumerate() {
                match slot {
                    Some(p) => paths.push(p.to_string_lossy().into_owned()),
                    None => {
                        return Err(CliError::Config(format!(
                            "--stage-{} missing: file input needs all four stage tensors",
                            i + 1
                        )))
                    }
                }
            }
            InputSpec::Files {
                stage_paths: [
                    paths[0].clone(),
                    paths[1].clone(),
                    paths[2].clone(),
                    paths[3].clone(),
                ],
            }
        }
        (None, false) => {
            return Err(CliError::Config(
                "no input: pass --synthetic <seed> or all of --stage-1..--stage-4".into(),
            ))
        }
    };
    Ok((config, input))
}

fn run_and_export<T: Scalar>(
    config: &PipelineConfig,
    input: &InputSpec,
    out: &Path,
) -> CliResult<()> {
    let pipeline = Pipeline::<T>::build(config.clone()).map_err(classify_run_error)?;
    let inputs = gather_inputs(&pipeline, config, input)?;
    let run = pipeline.forward(&inputs).map_err(classify_run_error)?;
    write_artifacts(&pipeline, &run, input, out)
}

fn gather_inputs<T: Scalar>(
    pipeline: &Pipeline<T>,
    config: &PipelineConfig,
    input: &InputSpec,
) -> CliResult<[FeatureMap<T>; 4]> {
    match input {
        InputSpec::Synthetic { seed } => Ok(pipeline.synthetic_inputs(*seed)),
        InputSpec::Files { stage_paths } => {
            let channels = [config.c1, config.c2, config.c3, config.c4];
            let dims = config.stage_dims();
            let mut maps = Vec::with_capacity(4);
            for i in 0..4 {
                let path = Path::new(&stage_paths[i]);
                let map: FeatureMap<T> = load_feature_map(path).map_err(|e| {
                    CliError::Input(format!("stage {} tensor {}: {e}", i + 1, path.display()))
                })?;
                let got = (map.channels(), map.height(), map.width());
                let want = (channels[i], dims[i].0, dims[i].1);
                if got != want {
                    return Err(CliError::Input(format!(
                        "stage {} tensor {} has shape {:?}, config requires {:?}",
                        i + 1,
                        path.display(),
                        got,
                        want
                    )));
                }
                // Catch bad values at the door: a NaN in a pixel the
                // resampler happens to skip would otherwise pass silently.
                if !map.all_finite() {
                    return Err(CliError::Numeric(format!(
                        "stage {} tensor {} contains non-finite values",
                        i + 1,
                        path.display()
                    )));
                }
                maps.push(map);
            }
            Ok(maps
                .try_into()
                .unwrap_or_else(|_| unreachable!("exactly four maps are pushed")))
        }
    }
}

fn write_artifacts<T: Scalar>(
    pipeline: &Pipeline<T>,
    run: &PipelineRun<T>,
    input: &InputSpec,
    out: &Path,
) -> CliResult<()> {
    for (file, map) in STAGE_FILES.iter().zip(&run.outputs) {
        let path = out.join(file);
        save_feature_map(map, &path).map_err(|e| {
            CliError::Input(format!("cannot write {}: {e}", path.display()))
        })?;
    }
    let der = pipeline.config().derived();
    let graph_doc = HypergraphJson::from_run(
        run,
        GridDims {
            h: der.h_t,
            w: der.w_t,
        },
    );
    to_json_file(&graph_doc, &out.join(HYPERGRAPH_FILE))?;
    to_json_file(&EntropyJson::from_report(&run.report), &out.join(ENTROPY_FILE))?;
    let manifest = RunManifest::new(pipeline, input.clone(), run.timings);
    to_json_file(&manifest, &out.join(MANIFEST_FILE))
}

/// Re-emit a run's hypergraph document on stdout after validating it.
pub fn cmd_export_hypergraph(run_dir: &Path) -> CliResult<()> {
    let doc: HypergraphJson = from_json_file(&run_dir.join(HYPERGRAPH_FILE))?;
    check_schema_version(doc.schema_version, HYPERGRAPH_FILE)?;
    doc.validate().map_err(CliError::Input)?;
    print_json(&doc)
}

/// Re-emit a run's entropy document on stdout after validating it.
pub fn cmd_entropy_report(run_dir: &Path) -> CliResult<()> {
    let doc: EntropyJson = from_json_file(&run_dir.join(ENTROPY_FILE))?;
    check_schema_version(doc.schema_version, ENTROPY_FILE)?;
    doc.validate().map_err(CliError::Input)?;
    print_json(&doc)
}

fn check_schema_version(found: u32, file: &str) -> CliResult<()> {
    if found != SCHEMA_VERSION {
        return Err(CliError::Input(format!(
            "{file} has schema_version {found}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(doc: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Input(format!("cannot serialize document: {e}")))?;
    println!("{text}");
    Ok(())
}

/// Run the verification suites on a named preset, printing one summary
/// line per suite. Any failure exits with the verification code and names
/// the failing suites; individual failure messages carry their case seeds
/// so a case can be replayed.
pub fn cmd_selfcheck(preset: &str, tolerance_scale: f64) -> CliResult<()> {
    let config = match preset {
        "tiny" => PipelineConfig::tiny(),
        "default" => PipelineConfig::default(),
        other => {
            return Err(CliError::Config(format!(
                "unknown preset '{other}' (expected 'tiny' or 'default')"
            )))
        }
    };
    if !tolerance_scale.is_finite() || tolerance_scale < 0.0 {
        return Err(CliError::Config(format!(
            "tolerance scale must be a finite value >= 0, got {tolerance_scale}"
        )));
    }
    let tol = Tolerances::scaled(tolerance_scale);
    let reports = standard_suites(&config, &tol);

    let mut failing = Vec::new();
    let mut total_cases = 0usize;
    for report in &reports {
        println!("{}", report.summary_line());
        for failure in report.failures.iter().take(3) {
            println!("  failure: {failure}");
        }
        if report.failures.len() > 3 {
            println!("  ... and {} more", report.failures.len() - 3);
        }
        total_cases += report.cases;
        if !report.passed() {
            failing.push(report.name);
        }
    }
    if failing.is_empty() {
        println!("selfcheck: PASS ({total_cases} cases)");
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "failing suites: {}",
            failing.join(", ")
        )))
    }
}

/// Time the forward pass per stage and print median / p95 milliseconds
/// as JSON. One unmeasured warmup repetition precedes the measured ones.
pub fn cmd_bench(config_path: Option<&Path>, reps: usize) -> CliResult<()> {
    if reps == 0 {
        return Err(CliError::Config("repetitions must be >= 1".into()));
    }
    let config = match config_path {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let doc = match config.precision {
        Precision::F32 => bench::<f32>(&config, reps),
        Precision::F64 => bench::<f64>(&config, reps),
    }?;
    print_json(&doc)
}

fn bench<T: Scalar>(config: &PipelineConfig, reps: usize) -> CliResult<BenchJson> {
    let pipeline = Pipeline::<T>::build(config.clone()).map_err(classify_run_error)?;
    let inputs = pipeline.synthetic_inputs(config.seed);
    pipeline.forward(&inputs).map_err(classify_run_error)?;

    let mut samples: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(reps));
    for _ in 0..reps {
        let run = pipeline.forward(&inputs).map_err(classify_run_error)?;
        let t = run.timings;
        for (dst, v) in samples.iter_mut().zip([
            t.preproc_ms,
            t.topology_ms,
            t.gating_ms,
            t.postproc_ms,
            t.total_ms,
        ]) {
            dst.push(v);
        }
    }
    let mut stats = samples.iter_mut().map(|s| stage_stats(s));
    Ok(BenchJson {
        schema_version: SCHEMA_VERSION,
        reps,
        stages: BenchStages {
            preproc: stats.next().unwrap(),
            topology: stats.next().unwrap(),
            gating: stats.next().unwrap(),
            postproc: stats.next().unwrap(),
            total: stats.next().unwrap(),
        },
    })
}

/// Nearest-rank percentiles over the sorted samples; with a single sample
/// the median and p95 coincide.
fn stage_stats(samples: &mut [f64]) -> StageStats {
    samples.sort_by(f64::total_cmp);
    let rank = |p: usize| {
        let idx = (p * samples.len()).div_ceil(100).max(1) - 1;
        samples[idx.min(samples.len() - 1)]
    };
    StageStats {
        median_ms: rank(50),
        p95_ms: rank(95),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_request(dir: &Path) -> RunRequest {
        let cfg_path = dir.join("tiny.cfg");
        std::fs::write(&cfg_path, tiny_cfg_text()).unwrap();
        RunRequest {
            config: Some(cfg_path),
            synthetic: Some(42),
            out: dir.join("out"),
            ..RunRequest::default()
        }
    }

    fn tiny_cfg_text() -> String {
        let cfg = PipelineConfig::tiny();
        format!(
            "H = {}\nW = {}\nC1 = {}\nC2 = {}\nC3 = {}\nC4 = {}\nCs = {}\nk = {}\nd = {}\nK = {}\n",
            cfg.h, cfg.w, cfg.c1, cfg.c2, cfg.c3, cfg.c4, cfg.cs, cfg.k, cfg.d, cfg.select_k
        )
    }

    #[test]
    fn run_writes_seven_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let req = tiny_request(dir.path());
        cmd_run(&req).unwrap();
        for file in STAGE_FILES {
            assert!(req.out.join(file).exists(), "{file} missing");
        }
        for file in [HYPERGRAPH_FILE, ENTROPY_FILE, MANIFEST_FILE] {
            assert!(req.out.join(file).exists(), "{file} missing");
        }
    }

    #[test]
    fn replay_rejects_extra_flags() {
        let req = RunRequest {
            replay: Some(PathBuf::from("m.json")),
            synthetic: Some(1),
            ..RunRequest::default()
        };
        let err = cmd_run(&req).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn partial_stage_flags_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = tiny_request(dir.path());
        req.synthetic = None;
        req.stages[0] = Some(dir.path().join("s1.dtt"));
        let err = cmd_run(&req).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("--stage-2"));
    }

    #[test]
    fn missing_stage_file_is_an_input_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = tiny_request(dir.path());
        req.synthetic = None;
        for i in 0..4 {
            req.stages[i] = Some(dir.path().join(format!("missing_{}.dtt", i + 1)));
        }
        let err = cmd_run(&req).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("missing_1.dtt"));
    }

    #[test]
    fn wrong_shape_stage_file_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = tiny_request(dir.path());
        req.synthetic = None;
        let cfg = PipelineConfig::tiny();
        let dims = cfg.stage_dims();
        let channels = [cfg.c1, cfg.c2, cfg.c3, cfg.c4];
        for i in 0..4 {
            let path = dir.path().join(format!("s{}.dtt", i + 1));
            // Stage 1 gets an extra channel; the rest are correct.
            let c = channels[i] + usize::from(i == 0);
            let map = FeatureMap::<f32>::zeros(c, dims[i].0, dims[i].1);
            save_feature_map(&map, &path).unwrap();
            req.stages[i] = Some(path);
        }
        let err = cmd_run(&req).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stage 1"));
    }

    #[test]
    fn single_sample_bench_has_equal_median_and_p95() {
        let mut samples = [3.5];
        let stats = stage_stats(&mut samples);
        assert_eq!(stats.median_ms, 3.5);
        assert_eq!(stats.p95_ms, 3.5);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let mut samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let stats = stage_stats(&mut samples);
        assert_eq!(stats.median_ms, 50.0);
        assert_eq!(stats.p95_ms, 95.0);
    }

    #[test]
    fn selfcheck_rejects_unknown_preset() {
        let err = cmd_selfcheck("huge", 1.0).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
