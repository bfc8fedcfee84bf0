//! Independent brute-force references and numerical differentiation.
//!
//! Everything here is deliberately slow, always accumulates in 64-bit, and
//! shares no computation code with the main path — only the tensor and
//! graph containers. Tests and the selfcheck command compare the two.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvKernel, FeatureMap};
use crate::topology::{Hyperedge, Hypergraph, NodeMatrix};

/// Reference dilated-KNN construction: full O(n^2) similarity matrix,
/// stable sort per center, same dilation and tie rules as the main path.
pub fn knn_bruteforce<T: Scalar>(nodes: &NodeMatrix<T>, k: usize, d: usize) -> Result<Hypergraph> {
    let n = nodes.n_nodes();
    if k == 0 || d == 0 || k * d >= n {
        return Err(Error::NeighborBudget {
            k,
            dilation: d,
            n_nodes: n,
        });
    }
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = nodes.node(i);
            let b = nodes.node(j);
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for t in 0..a.len() {
                let x = a[t].as_f64();
                let y = b[t].as_f64();
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            sim[i * n + j] = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na.sqrt() * nb.sqrt())
            };
        }
    }
    let hyperedges = (0..n)
        .map(|center| {
            // Candidates start in ascending index order; a stable sort on
            // distance alone then breaks ties by lower index.
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != center).collect();
            cand.sort_by(|&a, &b| {
                (1.0 - sim[center * n + a]).total_cmp(&(1.0 - sim[center * n + b]))
            });
            Hyperedge {
                center,
                neighbors: (0..k).map(|m| cand[m * d]).collect(),
            }
        })
        .collect();
    Ok(Hypergraph {
        n_nodes: n,
        k,
        dilation: d,
        hyperedges,
    })
}

/// Reference per-channel score: scalar 64-bit loop over `p ln p` with
/// `p` the clamped sigmoid of each value.
pub fn entropy_naive<T: Scalar>(f_chaotic: &FeatureMap<T>) -> Vec<f64> {
    let plane = f_chaotic.height() * f_chaotic.width();
    let mut scores = Vec::with_capacity(f_chaotic.channels());
    for c in 0..f_chaotic.channels() {
        let mut acc = 0.0f64;
        for &v in f_chaotic.channel(c) {
            let mut p = 1.0 / (1.0 + (-v.as_f64()).exp());
            p = p.clamp(1e-7, 1.0 - 1e-7);
            acc += p * p.ln();
        }
        scores.push(acc / plane as f64);
    }
    scores
}

/// Reference bottom-K selection: full stable sort ascending by
/// `(score, index)`, take the first `k`, re-sort ascending by index.
pub fn topk_naive(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::SelectOutOfRange {
            k,
            channels: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// Reference convolution: quadruple loop, 64-bit accumulation, zero
/// padding, cross-correlation orientation, grouped channels.
pub fn conv2d_naive<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    padding: usize,
    stride: usize,
) -> Result<FeatureMap<f64>> {
    if input.channels() != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            context: "conv2d_naive",
            expected: kernel.in_channels,
            got: input.channels(),
        });
    }
    let padded_h = input.height() + 2 * padding;
    let padded_w = input.width() + 2 * padding;
    if kernel.kernel_h > padded_h || kernel.kernel_w > padded_w {
        return Err(Error::KernelExceedsInput {
            kernel: (kernel.kernel_h, kernel.kernel_w),
            padded: (padded_h, padded_w),
        });
    }
    let out_h = (padded_h - kernel.kernel_h) / stride + 1;
    let out_w = (padded_w - kernel.kernel_w) / stride + 1;
    let ipg = kernel.in_channels / kernel.groups;
    let opg = kernel.out_channels / kernel.groups;
    let mut out = FeatureMap::<f64>::zeros(kernel.out_channels, out_h, out_w);
    for oc in 0..kernel.out_channels {
        let group = oc / opg;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut acc = kernel.bias[oc].as_f64();
                for icg in 0..ipg {
                    let ic = group * ipg + icg;
                    for kh in 0..kernel.kernel_h {
                        for kw in 0..kernel.kernel_w {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if ih < 0
                                || iw < 0
                                || ih >= input.height() as isize
                                || iw >= input.width() as isize
                            {
                                continue;
                            }
                            let x = input.at(ic, ih as usize, iw as usize).as_f64();
                            let w = kernel.weight_at(oc, icg, kh, kw).as_f64();
                            acc += x * w;
                        }
                    }
                }
                *out.at_mut(oc, oh, ow) = acc;
            }
        }
    }
    Ok(out)
}

/// One probe of the function under differentiation: its scalar value and,
/// where the computation involves a discrete selection (KNN topology,
/// channel choice), a fingerprint of that selection.
#[derive(Debug, Clone, Copy)]
pub struct FdProbe {
    pub value: f64,
    pub selection: Option<u64>,
}

/// Outcome of a central-difference probe at one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdEstimate {
    Gradient(f64),
    /// The discrete selection changed within the probe interval; the
    /// difference quotient does not estimate the frozen-selection
    /// derivative here.
    SelectionFlip,
}

/// Fold an index sequence into a fingerprint. The fold is sequential, so
/// differently ordered lists fingerprint differently — neighbor lists are
/// ordered, and that order matters.
pub fn selection_fingerprint(indices: impl IntoIterator<Item = usize>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for i in indices {
        h ^= i as u64 + 1;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Central finite difference at `x` with step `h = 1e-5 * max(1, |x|)`.
/// Evaluates the function at `x`, `x+h`, `x-h`; if the three probes do not
/// agree on the selection fingerprint, reports a flip instead of a value.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(f64) -> Result<FdProbe>,
    x: f64,
) -> Result<FdEstimate> {
    let h = 1e-5 * x.abs().max(1.0);
    let base = f(x)?;
    let plus = f(x + h)?;
    let minus = f(x - h)?;
    for p in [&base, &plus, &minus] {
        if !p.value.is_finite() {
            return Err(Error::NonFinite {
                stage: "finite_diff_grad",
            });
        }
    }
    if base.selection != plus.selection || base.selection != minus.selection {
        return Ok(FdEstimate::SelectionFlip);
    }
    Ok(FdEstimate::Gradient((plus.value - minus.value) / (2.0 * h)))
}

/// Relative error with an absolute floor: `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Summary of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckResult {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Compare `(analytic, numeric)` pairs against a relative tolerance.
pub fn grad_check(pairs: &[(f64, f64)], tol: f64) -> GradCheckResult {
    let mut worst = GradCheckResult {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        pass: true,
    };
    for (i, &(a, n)) in pairs.iter().enumerate() {
        let e = rel_err(a, n);
        if e > worst.max_rel_err {
            worst.max_rel_err = e;
            worst.worst_index = i;
            worst.analytic = a;
            worst.numeric = n;
        }
    }
    worst.pass = worst.max_rel_err <= tol;
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::channel_entropy;
    use crate::rng::SplitMix64;
    use crate::tensor::{conv2d, seeded_init};
    use crate::topology::dilated_knn;

    fn random_nodes(grid_h: usize, grid_w: usize, dim: usize, seed: u64) -> NodeMatrix<f64> {
        let mut rng = SplitMix64::new(seed);
        let feats = (0..grid_h * grid_w * dim)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        NodeMatrix::new(grid_h, grid_w, dim, feats).unwrap()
    }

    #[test]
    fn knn_two_node_mutual() {
        let nodes = random_nodes(1, 2, 4, 300);
        let g = knn_bruteforce(&nodes, 1, 1).unwrap();
        assert_eq!(g.hyperedges[0].neighbors, vec![1]);
        assert_eq!(g.hyperedges[1].neighbors, vec![0]);
    }

    #[test]
    fn knn_identical_features_lowest_index() {
        let nodes = NodeMatrix::new(1, 4, 2, vec![0.5; 8]).unwrap();
        let g = knn_bruteforce(&nodes, 2, 1).unwrap();
        assert_eq!(g.hyperedges[3].neighbors, vec![0, 1]);
    }

    #[test]
    fn knn_matches_main_path() {
        for seed in 0..20u64 {
            let mut rng = SplitMix64::new(9000 + seed);
            let gh = rng.range_usize(1, 4);
            let gw = rng.range_usize(2, 6);
            let dim = 2 * rng.range_usize(1, 5);
            let n = gh * gw;
            let k = rng.range_usize(1, 3.min(n - 1));
            let d = rng.range_usize(1, 3);
            if k * d >= n {
                continue;
            }
            let nodes = random_nodes(gh, gw, dim, 9100 + seed);
            let fast = dilated_knn(&nodes, k, d).unwrap();
            let slow = knn_bruteforce(&nodes, k, d).unwrap();
            assert_eq!(fast, slow, "seed {seed}");
        }
    }

    #[test]
    fn entropy_naive_reference_values() {
        let zeros = FeatureMap::<f64>::zeros(2, 3, 3);
        for s in entropy_naive(&zeros) {
            assert!((s - (-0.346_573_590_279_972_64)).abs() < 1e-15);
        }
        let single = FeatureMap::<f64>::new(1, 1, 1, vec![1.7]).unwrap();
        let p = 1.0 / (1.0 + (-1.7f64).exp());
        assert!((entropy_naive(&single)[0] - p * p.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_naive_matches_main_path() {
        let mut rng = SplitMix64::new(310);
        for _ in 0..20 {
            let c = rng.range_usize(1, 6);
            let h = rng.range_usize(1, 7);
            let w = rng.range_usize(1, 7);
            let mut m = FeatureMap::<f64>::zeros(c, h, w);
            for v in m.data_mut() {
                *v = rng.uniform(-4.0, 4.0);
            }
            let fast = channel_entropy(&m);
            let slow = entropy_naive(&m);
            for (f, s) in fast.iter().zip(&slow) {
                assert!(rel_err(*f, *s) < 1e-5);
            }
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_naive(&[-0.3, -0.1, -0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_naive(&[0.5, 0.5, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topk_naive(&[1.0, 2.0], 2).unwrap(), vec![0, 1]);
        assert!(topk_naive(&[1.0], 2).is_err());
    }

    #[test]
    fn conv_naive_identity_and_zero() {
        let mut rng = SplitMix64::new(320);
        let mut input = FeatureMap::<f64>::zeros(3, 4, 4);
        input.fill_uniform(&mut rng);
        let id = ConvKernel::identity_1x1(3);
        let out = conv2d_naive(&input, &id, 0, 1).unwrap();
        for (o, i) in out.data().iter().zip(input.data()) {
            assert_eq!(o, i);
        }
        let zero = ConvKernel::<f64>::zeros(2, 3, 3, 3, 1);
        let out = conv2d_naive(&input, &zero, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_naive_matches_main_path() {
        let mut rng = SplitMix64::new(330);
        for case in 0..15 {
            let groups = [1usize, 1, 2][case % 3];
            let ic = 2 * groups;
            let oc = 2 * groups;
            let (kh, kw) = [(1, 1), (3, 3), (3, 1)][case % 3];
            let stride = 1 + case % 2;
            let padding = case % 2;
            let mut input = FeatureMap::<f64>::zeros(ic, 5, 5);
            for v in input.data_mut() {
                *v = rng.uniform(-2.0, 2.0);
            }
            let kernel = seeded_init::<f64>(oc, ic, kh, kw, groups, &mut rng).unwrap();
            let fast = conv2d(&input, &kernel, padding, stride).unwrap();
            let slow = conv2d_naive(&input, &kernel, padding, stride).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (f, s) in fast.data().iter().zip(slow.data()) {
                assert!(rel_err(*f, *s) < 1e-6, "case {case}");
            }
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let mut f = |x: f64| {
            Ok(FdProbe {
                value: x * x,
                selection: None,
            })
        };
        match finite_diff_grad(&mut f, 3.0).unwrap() {
            FdEstimate::Gradient(g) => assert!((g - 6.0).abs() < 1e-8),
            FdEstimate::SelectionFlip => panic!("no selection involved"),
        }
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let mut f = |x: f64| {
            Ok(FdProbe {
                value: 2.5 * x - 7.0,
                selection: None,
            })
        };
        match finite_diff_grad(&mut f, -4.0).unwrap() {
            FdEstimate::Gradient(g) => assert!((g - 2.5).abs() < 1e-10),
            FdEstimate::SelectionFlip => panic!("no selection involved"),
        }
    }

    #[test]
    fn finite_diff_detects_selection_flip() {
        let mut f = |x: f64| {
            Ok(FdProbe {
                value: x,
                selection: Some(if x > 1.0 { 1 } else { 0 }),
            })
        };
        assert_eq!(
            finite_diff_grad(&mut f, 1.0).unwrap(),
            FdEstimate::SelectionFlip
        );
    }

    #[test]
    fn grad_check_reports_worst_pair() {
        let r = grad_check(&[(1.0, 1.0), (2.0, 2.2), (0.5, 0.5000001)], 1e-6);
        assert!(!r.pass);
        assert_eq!(r.worst_index, 1);
        assert!((r.max_rel_err - 0.2 / 2.2).abs() < 1e-12);
        let ok = grad_check(&[(3.0, 3.0 + 1e-9)], 1e-6);
        assert!(ok.pass);
    }
}
