//! Shared verification suites: oracle equivalence (KNN, entropy, top-K,
//! convolution), gradient checks against central finite differences,
//! structural invariants over random configurations, and the
//! channel-permutation property of the gating stage.
//!
//! The CLI selfcheck command and the integration tests all run these same
//! functions, so case counts, seeds, and tolerances live in one place.

use crate::error::Result;
use crate::gating::{epg_forward, select_low_entropy, channel_entropy, EntropySign, EpgParams};
use crate::oracle::{
    conv2d_naive, entropy_naive, finite_diff_grad, knn_bruteforce, selection_fingerprint,
    topk_naive, FdEstimate, FdProbe,
};
use crate::pipeline::{Pipeline, PipelineConfig, Precision, PARAM_NAMES};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{conv2d, seeded_init, FeatureMap};
use crate::topology::{dilated_knn, str_backward, str_forward, Hypergraph, NodeMatrix, StrParams};

pub const KNN_CASES: usize = 200;
pub const ENTROPY_CASES: usize = 100;
pub const CONV_CASES: usize = 50;
/// Minimum coordinates checked per gradient suite (flips excluded).
pub const GRAD_COORDS: usize = 20;
pub const STRUCTURE_CASES: usize = 50;
pub const PERMUTATION_CASES: usize = 20;

/// Outcome of one suite. `cases` counts comparisons actually performed;
/// `skipped` counts finite-difference coordinates dropped because the
/// probe straddled a discrete selection boundary.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            skipped: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// One human-readable status line.
    pub fn summary_line(&self) -> String {
        let skip = if self.skipped > 0 {
            format!(" ({} skipped at selection boundaries)", self.skipped)
        } else {
            String::new()
        };
        format!(
            "{}: {} cases, {} failures{}",
            self.name,
            self.cases,
            self.failures.len(),
            skip
        )
    }
}

/// Comparison tolerances. `scaled(0.0)` turns every approximate
/// comparison into an exact one, which is how the harness verifies that
/// the selfcheck command actually fails when something is wrong.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Entropy scores vs the naive oracle, relative.
    pub entropy_rel: f64,
    /// Convolution vs the naive oracle, relative, 32-bit path.
    pub conv_rel_f32: f64,
    /// Convolution vs the naive oracle, relative, 64-bit path.
    pub conv_rel_f64: f64,
    /// Module-level gradient checks, relative.
    pub grad_module_rel: f64,
    /// End-to-end gradient check, relative.
    pub grad_pipeline_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            entropy_rel: 1e-5,
            conv_rel_f32: 1e-4,
            conv_rel_f64: 1e-6,
            grad_module_rel: 1e-6,
            grad_pipeline_rel: 1e-5,
        }
    }
}

impl Tolerances {
    pub fn scaled(scale: f64) -> Self {
        let base = Self::default();
        Self {
            entropy_rel: base.entropy_rel * scale,
            conv_rel_f32: base.conv_rel_f32 * scale,
            conv_rel_f64: base.conv_rel_f64 * scale,
            grad_module_rel: base.grad_module_rel * scale,
            grad_pipeline_rel: base.grad_pipeline_rel * scale,
        }
    }
}

/// Relative error with a magnitude floor: values (or gradients) whose
/// true size is below `floor` are judged on the absolute scale
/// `tol * floor` instead, which keeps cancellation noise from failing
/// coordinates whose exact value is near zero.
fn floored_rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn random_perm(n: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.range_usize(0, i);
        p.swap(i, j);
    }
    p
}

fn graph_fingerprint(g: &Hypergraph) -> u64 {
    selection_fingerprint(
        g.hyperedges
            .iter()
            .flat_map(|e| std::iter::once(e.center).chain(e.neighbors.iter().copied())),
    )
}

// ---------------------------------------------------------------------
// Oracle-equivalence suites
// ---------------------------------------------------------------------

fn knn_case<T: Scalar>(
    case_seed: u64,
    quantize: bool,
    failures: &mut Vec<String>,
) {
    let mut rng = SplitMix64::new(case_seed);
    let grid_h = rng.range_usize(1, 8);
    let grid_w = rng.range_usize(if grid_h == 1 { 2 } else { 1 }, 8);
    let n = grid_h * grid_w;
    let dim = 2 * rng.range_usize(1, 8);
    let k = rng.range_usize(1, n.saturating_sub(1).min(8));
    let d = rng.range_usize(1, ((n - 1) / k).min(3));
    let features: Vec<T> = (0..n * dim)
        .map(|_| {
            let v = rng.uniform(-1.0, 1.0);
            T::from_f64(if quantize { (v * 4.0).round() / 4.0 } else { v })
        })
        .collect();
    let nodes = match NodeMatrix::new(grid_h, grid_w, dim, features) {
        Ok(m) => m,
        Err(e) => {
            failures.push(format!("case seed {case_seed:#018x}: node build failed: {e}"));
            return;
        }
    };
    let main = dilated_knn(&nodes, k, d);
    let oracle = knn_bruteforce(&nodes, k, d);
    match (main, oracle) {
        (Ok(a), Ok(b)) if a == b => {}
        (Ok(_), Ok(_)) => failures.push(format!(
            "case seed {case_seed:#018x}: hypergraph mismatch (grid {grid_h}x{grid_w}, dim {dim}, k {k}, d {d}, quantized {quantize})"
        )),
        (a, b) => failures.push(format!(
            "case seed {case_seed:#018x}: errors a={a:?} b={b:?}"
        )),
    }
}

/// Dilated neighbor selection vs the exhaustive reference, exact
/// hypergraph equality. Cases alternate 32- and 64-bit features; every
/// third case quantizes features to force distance ties.
pub fn knn_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("knn-oracle");
    let mut master = SplitMix64::new(seed);
    for case in 0..cases {
        let case_seed = master.next_u64();
        let quantize = case % 3 == 2;
        if case % 2 == 0 {
            knn_case::<f64>(case_seed, quantize, &mut report.failures);
        } else {
            knn_case::<f32>(case_seed, quantize, &mut report.failures);
        }
        report.cases += 1;
    }
    report
}

fn entropy_case<T: Scalar>(case_seed: u64, tol: &Tolerances, failures: &mut Vec<String>) {
    let mut rng = SplitMix64::new(case_seed);
    let c = rng.range_usize(1, 16);
    let h = rng.range_usize(1, 9);
    let w = rng.range_usize(1, 9);
    let tensor = FeatureMap::<T>::from_fn(c, h, w, |_, _, _| T::from_f64(rng.uniform(-4.0, 4.0)));
    let main = channel_entropy(&tensor);
    let naive = entropy_naive(&tensor);
    for (ch, (&a, &b)) in main.iter().zip(&naive).enumerate() {
        let e = floored_rel_err(a, b, 1e-12);
        if e > tol.entropy_rel {
            failures.push(format!(
                "case seed {case_seed:#018x}: channel {ch} entropy {a} vs oracle {b} (rel {e:.3e})"
            ));
        }
    }
    let k = rng.range_usize(1, c);
    let selected = select_low_entropy(&tensor, &main, k).map(|(_, s)| s);
    let reference = topk_naive(&main, k);
    match (selected, reference) {
        (Ok(a), Ok(b)) if a == b => {}
        (a, b) => failures.push(format!(
            "case seed {case_seed:#018x}: bottom-{k} selection {a:?} vs oracle {b:?}"
        )),
    }
}

/// Channel entropy vs the 64-bit naive oracle, plus exact bottom-K
/// selection equality against the full-sort reference.
pub fn entropy_suite(cases: usize, seed: u64, tol: &Tolerances) -> SuiteReport {
    let mut report = SuiteReport::new("entropy-oracle");
    let mut master = SplitMix64::new(seed);
    for case in 0..cases {
        let case_seed = master.next_u64();
        if case % 2 == 0 {
            entropy_case::<f32>(case_seed, tol, &mut report.failures);
        } else {
            entropy_case::<f64>(case_seed, tol, &mut report.failures);
        }
        report.cases += 1;
    }
    report
}

fn conv_case<T: Scalar>(case_seed: u64, tol: f64, failures: &mut Vec<String>) {
    let mut rng = SplitMix64::new(case_seed);
    let in_c = rng.range_usize(1, 5);
    let divisors: Vec<usize> = (1..=in_c).filter(|g| in_c.is_multiple_of(*g)).collect();
    let groups = divisors[rng.range_usize(0, divisors.len() - 1)];
    let out_c = groups * rng.range_usize(1, 3);
    let kh = rng.range_usize(1, 5);
    let kw = rng.range_usize(1, 5);
    let padding = rng.range_usize(0, 3);
    let stride = rng.range_usize(1, 2);
    let h = rng.range_usize(1, 8).max(kh.saturating_sub(2 * padding));
    let w = rng.range_usize(1, 8).max(kw.saturating_sub(2 * padding));
    let input = FeatureMap::<T>::from_fn(in_c, h, w, |_, _, _| T::from_f64(rng.uniform(-1.0, 1.0)));
    let kernel = match seeded_init::<T>(out_c, in_c, kh, kw, groups, &mut rng) {
        Ok(k) => k,
        Err(e) => {
            failures.push(format!("case seed {case_seed:#018x}: kernel build failed: {e}"));
            return;
        }
    };
    let main = conv2d(&input, &kernel, padding, stride);
    let naive = conv2d_naive(&input, &kernel, padding, stride);
    match (main, naive) {
        (Ok(a), Ok(b)) => {
            for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
                let e = floored_rel_err(x.as_f64(), y, 1.0);
                if e > tol {
                    failures.push(format!(
                        "case seed {case_seed:#018x}: element {i} = {x} vs oracle {y} (rel {e:.3e}, {in_c}->{out_c} g{groups} {kh}x{kw} p{padding} s{stride} on {h}x{w})"
                    ));
                    return;
                }
            }
        }
        (a, b) => failures.push(format!(
            "case seed {case_seed:#018x}: errors a={:?} b={:?}",
            a.err(),
            b.err()
        )),
    }
}

/// Convolution vs the quadruple-loop oracle over random geometries
/// (grouped and depthwise included), alternating 32- and 64-bit.
/// Relative error is measured against `max(|value|, 1)` so random sums
/// that cancel to near zero are judged on an absolute scale.
pub fn conv_suite(cases: usize, seed: u64, tol: &Tolerances) -> SuiteReport {
    let mut report = SuiteReport::new("conv-oracle");
    let mut master = SplitMix64::new(seed);
    for case in 0..cases {
        let case_seed = master.next_u64();
        if case % 2 == 0 {
            conv_case::<f64>(case_seed, tol.conv_rel_f64, &mut report.failures);
        } else {
            conv_case::<f32>(case_seed, tol.conv_rel_f32, &mut report.failures);
        }
        report.cases += 1;
    }
    report
}

// ---------------------------------------------------------------------
// Gradient suites (64-bit, central differences, frozen selections)
// ---------------------------------------------------------------------

/// Magnitude floor for gradient comparisons: coordinates whose true
/// gradient is below this are compared on the absolute scale `tol * floor`
/// (central differences cannot resolve relative error on a near-zero
/// derivative).
const GRAD_FLOOR: f64 = 1e-2;

/// Looks up a coordinate `(group name, index)` of the model under test.
type CoordFn<'a> = Box<dyn Fn(&str, usize) -> f64 + 'a>;
/// Sets a coordinate to the given value and re-evaluates the loss.
type ProbeFn<'a> = Box<dyn Fn(&str, usize, f64) -> Result<FdProbe> + 'a>;

struct GradHarness<'a> {
    groups: Vec<(&'static str, usize)>,
    analytic: CoordFn<'a>,
    read: CoordFn<'a>,
    probe: ProbeFn<'a>,
}

fn run_grad_harness(
    report: &mut SuiteReport,
    harness: &GradHarness<'_>,
    target: usize,
    tol: f64,
    rng: &mut SplitMix64,
) {
    let mut attempts = 0;
    let mut cursor = 0;
    while report.cases < target && attempts < target * 5 {
        attempts += 1;
        let (group, size) = harness.groups[cursor % harness.groups.len()];
        cursor += 1;
        let idx = if size == 1 {
            0
        } else {
            rng.range_usize(0, size - 1)
        };
        let base = (harness.read)(group, idx);
        let mut f = |x: f64| (harness.probe)(group, idx, x);
        match finite_diff_grad(&mut f, base) {
            Err(e) => report
                .failures
                .push(format!("{group}[{idx}]: probe failed: {e}")),
            Ok(FdEstimate::SelectionFlip) => report.skipped += 1,
            Ok(FdEstimate::Gradient(numeric)) => {
                let analytic = (harness.analytic)(group, idx);
                let e = floored_rel_err(analytic, numeric, GRAD_FLOOR);
                if e > tol {
                    report.failures.push(format!(
                        "{group}[{idx}]: analytic {analytic:.9e} vs central difference {numeric:.9e} (rel {e:.3e})"
                    ));
                }
                report.cases += 1;
            }
        }
    }
    if report.cases < target {
        report.failures.push(format!(
            "only {} of {} coordinates could be checked (too many selection flips)",
            report.cases, target
        ));
    }
}

fn str_param_slot<'a>(p: &'a mut StrParams<f64>, name: &str) -> &'a mut [f64] {
    match name {
        "alpha" => std::slice::from_mut(&mut p.alpha),
        "beta" => std::slice::from_mut(&mut p.beta),
        "epsilon" => std::slice::from_mut(&mut p.epsilon),
        "refine_w" => &mut p.refine.weights,
        "refine_b" => &mut p.refine.bias,
        "update_w" => &mut p.update.weights,
        "update_b" => &mut p.update.bias,
        "norm_scale" => &mut p.norm_scale,
        "norm_shift" => &mut p.norm_shift,
        other => unreachable!("unknown group {other}"),
    }
}

/// Hypergraph-stage gradients vs central differences on a 3x3 grid with
/// dilation 2, projecting the output against a fixed random direction.
pub fn str_grad_suite(coords: usize, seed: u64, tol: &Tolerances) -> SuiteReport {
    let mut report = SuiteReport::new("grad-topology");
    let mut rng = SplitMix64::new(seed);
    let c = 8;
    let params = StrParams::<f64> {
        alpha: 0.3,
        beta: -0.2,
        epsilon: 0.1,
        k: 2,
        dilation: 2,
        refine: seeded_init(c, c, 3, 3, 1, &mut rng).expect("refine kernel"),
        update: seeded_init(c, c, 1, 1, 1, &mut rng).expect("update kernel"),
        norm_scale: (0..c).map(|_| rng.uniform(0.5, 1.5)).collect(),
        norm_shift: (0..c).map(|_| rng.uniform(-0.3, 0.3)).collect(),
    };
    let input = FeatureMap::<f64>::from_fn(c, 3, 3, |_, _, _| rng.uniform(-1.5, 1.5));
    let proj: Vec<f64> = (0..input.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let (out, cache) = match str_forward(&input, &params) {
        Ok(v) => v,
        Err(e) => {
            report.failures.push(format!("forward failed: {e}"));
            return report;
        }
    };
    let grad_map = FeatureMap::new(out.channels(), out.height(), out.width(), proj.clone())
        .expect("projection shape");
    let grads = match str_backward(&input, &params, &cache, &grad_map) {
        Ok(g) => g,
        Err(e) => {
            report.failures.push(format!("backward failed: {e}"));
            return report;
        }
    };

    let groups = vec![
        ("f_concat", input.len()),
        ("alpha", 1),
        ("beta", 1),
        ("epsilon", 1),
        ("refine_w", params.refine.weights.len()),
        ("refine_b", params.refine.bias.len()),
        ("update_w", params.update.weights.len()),
        ("update_b", params.update.bias.len()),
        ("norm_scale", c),
        ("norm_shift", c),
    ];
    let harness = GradHarness {
        groups,
        analytic: Box::new(|group, idx| match group {
            "f_concat" => grads.f_concat.data()[idx],
            "alpha" => grads.alpha,
            "beta" => grads.beta,
            "epsilon" => grads.epsilon,
            "refine_w" => grads.refine.weights[idx],
            "refine_b" => grads.refine.bias[idx],
            "update_w" => grads.update.weights[idx],
            "update_b" => grads.update.bias[idx],
            "norm_scale" => grads.norm_scale[idx],
            "norm_shift" => grads.norm_shift[idx],
            other => unreachable!("unknown group {other}"),
        }),
        read: Box::new(|group, idx| {
            let mut p = params.clone();
            match group {
                "f_concat" => input.data()[idx],
                _ => str_param_slot(&mut p, group)[idx],
            }
        }),
        probe: Box::new(|group, idx, x| {
            let mut input = input.clone();
            let mut params = params.clone();
            match group {
                "f_concat" => input.data_mut()[idx] = x,
                _ => str_param_slot(&mut params, group)[idx] = x,
            }
            let (out, cache) = str_forward(&input, &params)?;
            Ok(FdProbe {
                value: dot(out.data(), &proj),
                selection: Some(graph_fingerprint(&cache.graph)),
            })
        }),
    };
    run_grad_harness(
        &mut report,
        &harness,
        coords,
        tol.grad_module_rel,
        &mut SplitMix64::new(seed ^ 0xA5A5),
    );
    report
}

fn epg_param_slot<'a>(p: &'a mut EpgParams<f64>, name: &str) -> &'a mut [f64] {
    match name {
        "gate_w" => &mut p.gate.weights,
        "gate_b" => &mut p.gate.bias,
        "perturb_w" => &mut p.perturb.weights,
        "perturb_b" => &mut p.perturb.bias,
        other => unreachable!("unknown group {other}"),
    }
}

/// Gating-stage gradients vs central differences, including the
/// perturbation kernel whose gradient must be identically zero off the
/// selection boundaries.
pub fn epg_grad_suite(coords: usize, seed: u64, tol: &Tolerances) -> SuiteReport {
    let mut report = SuiteReport::new("grad-gating");
    let mut rng = SplitMix64::new(seed);
    let c = 8;
    let select_k = 4;
    let params = EpgParams::<f64> {
        mu: 3.99,
        select_k,
        perturb: seeded_init(c, c, 3, 3, c, &mut rng).expect("perturb kernel"),
        gate: seeded_init(1, select_k, 7, 7, 1, &mut rng).expect("gate kernel"),
        sign: EntropySign::Literal,
    };
    let input = FeatureMap::<f64>::from_fn(c, 3, 3, |_, _, _| rng.uniform(0.05, 0.95));
    let proj: Vec<f64> = (0..input.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let (out, _, cache) = match epg_forward(&input, &params) {
        Ok(v) => v,
        Err(e) => {
            report.failures.push(format!("forward failed: {e}"));
            return report;
        }
    };
    let grad_map = FeatureMap::new(out.channels(), out.height(), out.width(), proj.clone())
        .expect("projection shape");
    let grads = match crate::gating::epg_backward(&input, &params, &cache, &grad_map) {
        Ok(g) => g,
        Err(e) => {
            report.failures.push(format!("backward failed: {e}"));
            return report;
        }
    };

    let groups = vec![
        ("f_str", input.len()),
        ("gate_w", params.gate.weights.len()),
        ("gate_b", 1),
        ("perturb_w", params.perturb.weights.len()),
        ("perturb_b", params.perturb.bias.len()),
    ];
    let harness = GradHarness {
        groups,
        analytic: Box::new(|group, idx| match group {
            "f_str" => grads.f_str.data()[idx],
            "gate_w" => grads.gate.weights[idx],
            "gate_b" => grads.gate.bias[idx],
            "perturb_w" => grads.perturb.weights[idx],
            "perturb_b" => grads.perturb.bias[idx],
            other => unreachable!("unknown group {other}"),
        }),
        read: Box::new(|group, idx| {
            let mut p = params.clone();
            match group {
                "f_str" => input.data()[idx],
                _ => epg_param_slot(&mut p, group)[idx],
            }
        }),
        probe: Box::new(|group, idx, x| {
            let mut input = input.clone();
            let mut params = params.clone();
            match group {
                "f_str" => input.data_mut()[idx] = x,
                _ => epg_param_slot(&mut params, group)[idx] = x,
            }
            let (out, report, _) = epg_forward(&input, &params)?;
            Ok(FdProbe {
                value: dot(out.data(), &proj),
                selection: Some(selection_fingerprint(report.selected.iter().copied())),
            })
        }),
    };
    run_grad_harness(
        &mut report,
        &harness,
        coords,
        tol.grad_module_rel,
        &mut SplitMix64::new(seed ^ 0x5A5A),
    );
    report
}

/// End-to-end gradient check on the tiny preset: one coordinate from
/// every input map and every parameter group, loss formed by projecting
/// all four stage outputs against fixed random directions.
pub fn pipeline_grad_suite(seed: u64, tol: &Tolerances) -> SuiteReport {
    let mut report = SuiteReport::new("grad-pipeline");
    let mut cfg = PipelineConfig::tiny();
    cfg.alpha = 0.25;
    cfg.beta = -0.15;
    cfg.epsilon = 0.05;
    cfg.precision = Precision::F64;
    cfg.seed = seed;
    let pipeline = match Pipeline::<f64>::build(cfg) {
        Ok(p) => p,
        Err(e) => {
            report.failures.push(format!("build failed: {e}"));
            return report;
        }
    };
    let mut rng = SplitMix64::new(seed ^ 0xC0FFEE);
    let inputs = pipeline.synthetic_inputs(rng.next_u64());
    let run = match pipeline.forward(&inputs) {
        Ok(r) => r,
        Err(e) => {
            report.failures.push(format!("forward failed: {e}"));
            return report;
        }
    };
    let projections: [FeatureMap<f64>; 4] = std::array::from_fn(|i| {
        let (c, h, w) = run.outputs[i].shape();
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.uniform(-1.0, 1.0))
    });
    let grads = match pipeline.backward(&inputs, &run, &projections) {
        Ok(g) => g,
        Err(e) => {
            report.failures.push(format!("backward failed: {e}"));
            return report;
        }
    };

    let input_names = ["input_1", "input_2", "input_3", "input_4"];
    let mut groups: Vec<(&'static str, usize)> = input_names
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, inputs[i].len()))
        .collect();
    for name in PARAM_NAMES {
        groups.push((name, pipeline.param(name).expect("known name").len()));
    }
    let target = groups.len().max(GRAD_COORDS);

    let input_index = |group: &str| {
        input_names
            .iter()
            .position(|&n| n == group)
    };
    let harness = GradHarness {
        groups,
        analytic: Box::new(|group, idx| match input_index(group) {
            Some(i) => grads.inputs[i].data()[idx],
            None => grads.param(group).expect("known name")[idx],
        }),
        read: Box::new(|group, idx| match input_index(group) {
            Some(i) => inputs[i].data()[idx],
            None => pipeline.param(group).expect("known name")[idx],
        }),
        probe: Box::new(|group, idx, x| {
            let mut pipeline = pipeline.clone();
            let mut inputs = inputs.clone();
            match input_index(group) {
                Some(i) => inputs[i].data_mut()[idx] = x,
                None => pipeline.param_mut(group)?[idx] = x,
            }
            let run = pipeline.forward(&inputs)?;
            let value = (0..4)
                .map(|i| dot(run.outputs[i].data(), projections[i].data()))
                .sum();
            // The two discrete selections: neighbor topology, then the
            // gated channel set, separated by an out-of-range marker.
            let fp = selection_fingerprint(
                run.graph
                    .hyperedges
                    .iter()
                    .flat_map(|e| std::iter::once(e.center).chain(e.neighbors.iter().copied()))
                    .chain(std::iter::once(0x00FF_FFFF))
                    .chain(run.report.selected.iter().copied()),
            );
            Ok(FdProbe {
                value,
                selection: Some(fp),
            })
        }),
    };
    run_grad_harness(
        &mut report,
        &harness,
        target,
        tol.grad_pipeline_rel,
        &mut SplitMix64::new(seed ^ 0xFEED),
    );
    report
}

// ---------------------------------------------------------------------
// Structural-invariant suite
// ---------------------------------------------------------------------

fn random_config(rng: &mut SplitMix64, case: usize) -> PipelineConfig {
    let mut h_units = rng.range_usize(1, 4);
    let mut w_units = rng.range_usize(1, 4);
    if h_units * w_units < 2 {
        if case.is_multiple_of(2) {
            h_units = 2;
        } else {
            w_units = 2;
        }
    }
    let n = h_units * w_units;
    let cs = rng.range_usize(1, 4);
    let k = rng.range_usize(1, (n - 1).min(4));
    let d = rng.range_usize(1, ((n - 1) / k).min(3));
    PipelineConfig {
        h: 32 * h_units,
        w: 32 * w_units,
        c1: rng.range_usize(1, 6),
        c2: rng.range_usize(1, 6),
        c3: rng.range_usize(1, 6),
        c4: rng.range_usize(1, 6),
        cs,
        k,
        d,
        epsilon: rng.uniform(-0.5, 0.5),
        alpha: rng.uniform(-0.5, 0.5),
        beta: rng.uniform(-0.5, 0.5),
        mu: rng.uniform(0.5, 4.0),
        select_k: rng.range_usize(1, 4 * cs),
        entropy_sign: if case.is_multiple_of(2) {
            EntropySign::Literal
        } else {
            EntropySign::Conventional
        },
        seed: rng.next_u64(),
        precision: if case.is_multiple_of(2) {
            Precision::F64
        } else {
            Precision::F32
        },
    }
}

fn structure_case<T: Scalar>(cfg: &PipelineConfig, input_seed: u64) -> std::result::Result<(), String> {
    let pipeline = Pipeline::<T>::build(cfg.clone()).map_err(|e| format!("build: {e}"))?;
    let inputs = pipeline.synthetic_inputs(input_seed);
    let run = pipeline.forward(&inputs).map_err(|e| format!("forward: {e}"))?;
    let der = cfg.derived();

    run.graph.validate().map_err(|e| format!("graph: {e}"))?;
    if run.graph.hyperedges.len() != der.n_nodes {
        return Err(format!(
            "expected {} hyperedges, got {}",
            der.n_nodes,
            run.graph.hyperedges.len()
        ));
    }
    for e in &run.graph.hyperedges {
        if e.neighbors.len() != cfg.k {
            return Err(format!(
                "hyperedge at {} has {} neighbors, expected {}",
                e.center,
                e.neighbors.len(),
                cfg.k
            ));
        }
    }
    for &v in run.f_str.data() {
        let v = v.as_f64();
        if !(v > 0.0 && v < 1.0) {
            return Err(format!("updated node feature {v} escapes (0,1)"));
        }
    }
    for &g in &run.edge_gates {
        if !(g > 0.0 && g < 1.0) {
            return Err(format!("hyperedge gate {g} escapes (0,1)"));
        }
    }
    for (&e, &s) in run.f_epg.data().iter().zip(run.f_str.data()) {
        if e.as_f64().abs() > s.as_f64().abs() {
            return Err(format!(
                "gated magnitude {} exceeds ungated {}",
                e.as_f64(),
                s.as_f64()
            ));
        }
    }
    let channels = cfg.stage_channels();
    let dims = cfg.stage_dims();
    for i in 0..4 {
        let want = (channels[i], dims[i].0, dims[i].1);
        if run.outputs[i].shape() != want {
            return Err(format!(
                "stage {} output {:?}, expected {:?}",
                i + 1,
                run.outputs[i].shape(),
                want
            ));
        }
    }
    Ok(())
}

/// Random valid configurations end to end: hypergraph structure, output
/// ranges, gate bounds, the gating contraction, and stage shapes.
pub fn structure_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("structure");
    let mut master = SplitMix64::new(seed);
    for case in 0..cases {
        let case_seed = master.next_u64();
        let mut rng = SplitMix64::new(case_seed);
        let cfg = random_config(&mut rng, case);
        let input_seed = rng.next_u64();
        let outcome = match cfg.precision {
            Precision::F32 => structure_case::<f32>(&cfg, input_seed),
            Precision::F64 => structure_case::<f64>(&cfg, input_seed),
        };
        if let Err(why) = outcome {
            report
                .failures
                .push(format!("case seed {case_seed:#018x}: {why} (config {cfg:?})"));
        }
        report.cases += 1;
    }
    report
}

// ---------------------------------------------------------------------
// Channel-permutation suite
// ---------------------------------------------------------------------

fn permutation_case(case_seed: u64, sign: EntropySign) -> std::result::Result<(), String> {
    let mut rng = SplitMix64::new(case_seed);
    let c = rng.range_usize(4, 12);
    let h = rng.range_usize(2, 6);
    let w = rng.range_usize(2, 6);
    let select_k = rng.range_usize(1, c);
    let params = EpgParams::<f64> {
        mu: 3.99,
        select_k,
        perturb: seeded_init(c, c, 3, 3, c, &mut rng).map_err(|e| e.to_string())?,
        gate: seeded_init(1, select_k, 7, 7, 1, &mut rng).map_err(|e| e.to_string())?,
        sign,
    };
    let input = FeatureMap::<f64>::from_fn(c, h, w, |_, _, _| rng.uniform(0.02, 0.98));
    let (_, base, _) = epg_forward(&input, &params).map_err(|e| e.to_string())?;

    let perm = random_perm(c, &mut rng);
    let permuted_input = FeatureMap::from_fn(c, h, w, |ci, hi, wi| input.at(perm[ci], hi, wi));
    // The perturbation is depthwise, so channel identity travels with its
    // filter row: permute the kernel rows alongside the channels.
    let mut permuted_params = params.clone();
    let block = params.perturb.kernel_h * params.perturb.kernel_w;
    for (new, &old) in perm.iter().enumerate() {
        permuted_params.perturb.weights[new * block..(new + 1) * block]
            .copy_from_slice(&params.perturb.weights[old * block..(old + 1) * block]);
        permuted_params.perturb.bias[new] = params.perturb.bias[old];
    }
    let (_, moved, _) = epg_forward(&permuted_input, &permuted_params).map_err(|e| e.to_string())?;

    for (new, &old) in perm.iter().enumerate() {
        if moved.scores[new] != base.scores[old] {
            return Err(format!(
                "score of channel {old} changed under permutation: {} vs {}",
                base.scores[old], moved.scores[new]
            ));
        }
    }
    let mut expected: Vec<usize> = (0..c).filter(|&i| base.selected.contains(&perm[i])).collect();
    expected.sort_unstable();
    if moved.selected != expected {
        return Err(format!(
            "selected set {:?} did not map through the permutation (expected {:?})",
            moved.selected, expected
        ));
    }
    Ok(())
}

/// Permuting the gating input's channels (with the depthwise filter rows
/// carried along) must permute the 64-bit entropy scores bitwise and map
/// the selected set through the same permutation.
pub fn permutation_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("channel-permutation");
    let mut master = SplitMix64::new(seed);
    for case in 0..cases {
        let case_seed = master.next_u64();
        let sign = if case % 2 == 0 {
            EntropySign::Literal
        } else {
            EntropySign::Conventional
        };
        if let Err(why) = permutation_case(case_seed, sign) {
            report
                .failures
                .push(format!("case seed {case_seed:#018x}: {why}"));
        }
        report.cases += 1;
    }
    report
}

// ---------------------------------------------------------------------
// Preset smoke + standard bundle
// ---------------------------------------------------------------------

fn smoke_case<T: Scalar>(cfg: &PipelineConfig) -> std::result::Result<(), String> {
    structure_case::<T>(cfg, cfg.seed ^ 0x510E)?;
    let pipeline = Pipeline::<T>::build(cfg.clone()).map_err(|e| format!("build: {e}"))?;
    let inputs = pipeline.synthetic_inputs(cfg.seed ^ 0x510E);
    let a = pipeline.forward(&inputs).map_err(|e| e.to_string())?;
    let b = pipeline.forward(&inputs).map_err(|e| e.to_string())?;
    for i in 0..4 {
        if a.outputs[i] != b.outputs[i] {
            return Err(format!("stage {} output not bit-stable across calls", i + 1));
        }
    }
    if a.graph != b.graph || a.report.scores != b.report.scores {
        return Err("graph or entropy report not bit-stable across calls".into());
    }
    Ok(())
}

/// One full forward on the given configuration: structural invariants
/// plus bit-stability across repeated calls.
pub fn preset_smoke(cfg: &PipelineConfig) -> SuiteReport {
    let mut report = SuiteReport::new("preset-smoke");
    let outcome = match cfg.precision {
        Precision::F32 => smoke_case::<f32>(cfg),
        Precision::F64 => smoke_case::<f64>(cfg),
    };
    if let Err(why) = outcome {
        report.failures.push(why);
    }
    report.cases += 1;
    report
}

/// The full documented bundle at the standard counts and fixed seeds.
/// `preset` chooses the configuration exercised by the smoke suite.
pub fn standard_suites(preset: &PipelineConfig, tol: &Tolerances) -> Vec<SuiteReport> {
    vec![
        knn_suite(KNN_CASES, 0xD7EA_0001),
        entropy_suite(ENTROPY_CASES, 0xD7EA_0002, tol),
        conv_suite(CONV_CASES, 0xD7EA_0003, tol),
        str_grad_suite(GRAD_COORDS, 0xD7EA_0004, tol),
        epg_grad_suite(GRAD_COORDS, 0xD7EA_0005, tol),
        pipeline_grad_suite(0xD7EA_0006, tol),
        structure_suite(STRUCTURE_CASES, 0xD7EA_0007),
        permutation_suite(PERMUTATION_CASES, 0xD7EA_0008),
        preset_smoke(preset),
    ]
}
