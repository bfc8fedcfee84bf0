//! Entropy-gated channel attention: perturb the topology output with one
//! logistic-map step plus a depthwise convolution, score each channel by
//! the spatial mean of `P ln P` (P the sigmoid of the perturbed value),
//! select the K lowest-scoring channels, and gate the full map with a
//! spatial attention map derived from that subset.
//!
//! The scoring formula is used literally — it is the negative of the
//! conventional pointwise entropy term, so "lowest score" means the most
//! negative mean. The `conventional` sign setting negates the scores
//! before selection for comparison runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid_grad_from_output, sigmoid_scalar, Scalar};
use crate::tensor::{conv2d, conv2d_backward, sigmoid, ConvGrads, ConvKernel, FeatureMap};

/// Which sign of the channel score drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropySign {
    /// Score = mean of `P ln P`, selection takes the most negative.
    Literal,
    /// Score = -mean of `P ln P` (conventional pointwise entropy term).
    Conventional,
}

/// Parameters of the gating stage.
#[derive(Debug, Clone)]
pub struct EpgParams<T> {
    /// Logistic-map coefficient; fixed, not differentiated.
    pub mu: f64,
    /// Number of channels the gate convolution sees.
    pub select_k: usize,
    /// 3x3 depthwise C -> C, padding 1.
    pub perturb: ConvKernel<T>,
    /// 7x7 dense K -> 1, padding 3.
    pub gate: ConvKernel<T>,
    pub sign: EntropySign,
}

/// Per-channel scores and the selected channel set.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    /// Literal-sign scores (mean of `P ln P`), 64-bit, one per channel.
    pub scores: Vec<f64>,
    /// Selected channel indices, ascending.
    pub selected: Vec<usize>,
    pub mu: f64,
    pub select_k: usize,
    pub sign: EntropySign,
}

/// One logistic-map step `mu * x * (1 - x)`.
#[inline]
pub fn logistic_map<T: Scalar>(x: T, mu: f64) -> T {
    T::from_f64(mu) * x * (T::one() - x)
}

fn check_perturb_kernel<T: Scalar>(kernel: &ConvKernel<T>, channels: usize) -> Result<()> {
    if kernel.in_channels != channels
        || kernel.out_channels != channels
        || kernel.groups != channels
        || kernel.kernel_h != 3
        || kernel.kernel_w != 3
    {
        return Err(Error::InvalidKernel {
            reason: format!(
                "perturbation kernel must be 3x3 depthwise {channels}->{channels}, got {}x{} {}->{} groups {}",
                kernel.kernel_h, kernel.kernel_w, kernel.in_channels, kernel.out_channels, kernel.groups
            ),
        });
    }
    Ok(())
}

fn check_gate_kernel<T: Scalar>(kernel: &ConvKernel<T>, select_k: usize) -> Result<()> {
    if kernel.in_channels != select_k
        || kernel.out_channels != 1
        || kernel.groups != 1
        || kernel.kernel_h != 7
        || kernel.kernel_w != 7
    {
        return Err(Error::InvalidKernel {
            reason: format!(
                "gate kernel must be 7x7 dense {select_k}->1, got {}x{} {}->{} groups {}",
                kernel.kernel_h, kernel.kernel_w, kernel.in_channels, kernel.out_channels, kernel.groups
            ),
        });
    }
    Ok(())
}

/// Domain slack for the `[0, 1]` input precondition.
const DOMAIN_TOL: f64 = 1e-6;

/// One logistic-map step elementwise, then the depthwise 3x3 convolution.
/// Inputs must lie in `[0, 1]` within a `1e-6` slack.
pub fn chaotic_perturb<T: Scalar>(
    f_str: &FeatureMap<T>,
    params: &EpgParams<T>,
) -> Result<FeatureMap<T>> {
    check_perturb_kernel(&params.perturb, f_str.channels())?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in f_str.data() {
        let x = v.as_f64();
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !f_str.is_empty() && (lo < -DOMAIN_TOL || hi > 1.0 + DOMAIN_TOL) {
        return Err(Error::Domain {
            context: "chaotic_perturb",
            min: lo,
            max: hi,
        });
    }
    let stepped = f_str.map(|x| logistic_map(x, params.mu));
    conv2d(&stepped, &params.perturb, 1, 1)
}

/// Per-channel score: spatial mean of `P ln P` with
/// `P = sigmoid(value)` clamped to `[1e-7, 1 - 1e-7]`. The mean
/// accumulates in 64-bit regardless of the working precision.
pub fn channel_entropy<T: Scalar>(f_chaotic: &FeatureMap<T>) -> Vec<f64> {
    let plane = f_chaotic.height() * f_chaotic.width();
    (0..f_chaotic.channels())
        .map(|c| {
            let mut acc = 0.0f64;
            for &v in f_chaotic.channel(c) {
                let p = sigmoid_scalar(v).as_f64();
                acc += p * p.ln();
            }
            acc / plane as f64
        })
        .collect()
}

/// Indices of the `k` smallest scores, ties broken by lower index,
/// returned in ascending index order.
fn bottom_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut sel: Vec<usize> = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Gather the channels of `f_str` with the `k` lowest scores (ties to the
/// lower index), assembled in ascending channel order.
pub fn select_low_entropy<T: Scalar>(
    f_str: &FeatureMap<T>,
    scores: &[f64],
    k: usize,
) -> Result<(FeatureMap<T>, Vec<usize>)> {
    let c = f_str.channels();
    if scores.len() != c {
        return Err(Error::ShapeMismatch {
            context: "select_low_entropy",
            expected: format!("{c} scores"),
            got: format!("{}", scores.len()),
        });
    }
    if k == 0 || k > c {
        return Err(Error::SelectOutOfRange { k, channels: c });
    }
    let selected = bottom_k_indices(scores, k);
    let mut subset = FeatureMap::zeros(k, f_str.height(), f_str.width());
    for (slot, &ch) in selected.iter().enumerate() {
        subset.channel_mut(slot).copy_from_slice(f_str.channel(ch));
    }
    Ok((subset, selected))
}

/// Spatial attention map: sigmoid of the 7x7 K -> 1 convolution over the
/// selected subset. Output is `1 x H x W`, strictly inside `(0, 1)`.
pub fn spatial_gate<T: Scalar>(
    subset: &FeatureMap<T>,
    params: &EpgParams<T>,
) -> Result<FeatureMap<T>> {
    check_gate_kernel(&params.gate, subset.channels())?;
    Ok(sigmoid(&conv2d(subset, &params.gate, 3, 1)?))
}

/// Forward state kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct EpgCache<T> {
    /// Channels of the input picked by the selection, gate-conv input.
    pub subset: FeatureMap<T>,
    /// `1 x H x W` attention map (post-sigmoid).
    pub gate_map: FeatureMap<T>,
    pub selected: Vec<usize>,
}

/// Full gating stage: perturb, score, select, gate, and modulate.
/// Returns the gated map, the report, and the reverse-pass cache.
pub fn epg_forward<T: Scalar>(
    f_str: &FeatureMap<T>,
    params: &EpgParams<T>,
) -> Result<(FeatureMap<T>, EntropyReport, EpgCache<T>)> {
    let f_chaotic = chaotic_perturb(f_str, params)?;
    let scores = channel_entropy(&f_chaotic);
    let effective: Vec<f64> = match params.sign {
        EntropySign::Literal => scores.clone(),
        EntropySign::Conventional => scores.iter().map(|s| -s).collect(),
    };
    let (subset, selected) = select_low_entropy(f_str, &effective, params.select_k)?;
    let gate_map = spatial_gate(&subset, params)?;

    let gate_plane = gate_map.channel(0);
    let plane = f_str.height() * f_str.width();
    let mut gated = FeatureMap::zeros(f_str.channels(), f_str.height(), f_str.width());
    for c in 0..f_str.channels() {
        let src = f_str.channel(c);
        let dst = gated.channel_mut(c);
        for i in 0..plane {
            dst[i] = src[i] * gate_plane[i];
        }
    }
    let report = EntropyReport {
        scores,
        selected: selected.clone(),
        mu: params.mu,
        select_k: params.select_k,
        sign: params.sign,
    };
    Ok((
        gated,
        report,
        EpgCache {
            subset,
            gate_map,
            selected,
        },
    ))
}

/// Gradients produced by [`epg_backward`].
#[derive(Debug, Clone)]
pub struct EpgGrads<T> {
    pub f_str: FeatureMap<T>,
    /// Identically zero: the perturbation feeds only the frozen channel
    /// selection, which carries no gradient on its constancy regions.
    pub perturb: ConvGrads<T>,
    pub gate: ConvGrads<T>,
}

/// Reverse-mode differentiation of [`epg_forward`] with the selected
/// channel set held fixed. The gradient reaches `f_str` through both the
/// multiplicative identity path and the gate path via the selected
/// channels; the perturbation/score branch exists only to pick channels,
/// so it contributes no gradient where the selection is locally constant.
pub fn epg_backward<T: Scalar>(
    f_str: &FeatureMap<T>,
    params: &EpgParams<T>,
    cache: &EpgCache<T>,
    grad_gated: &FeatureMap<T>,
) -> Result<EpgGrads<T>> {
    if grad_gated.shape() != f_str.shape() {
        return Err(Error::ShapeMismatch {
            context: "epg_backward",
            expected: format!("{:?} upstream gradient", f_str.shape()),
            got: format!("{:?}", grad_gated.shape()),
        });
    }
    let plane = f_str.height() * f_str.width();
    let gate_plane = cache.gate_map.channel(0);

    // Product rule: identity factor and gate factor.
    let mut g_f_str = FeatureMap::zeros(f_str.channels(), f_str.height(), f_str.width());
    let mut g_gate = vec![T::zero(); plane];
    for c in 0..f_str.channels() {
        let g = grad_gated.channel(c);
        let src = f_str.channel(c);
        let dst = g_f_str.channel_mut(c);
        for i in 0..plane {
            dst[i] = dst[i] + g[i] * gate_plane[i];
            g_gate[i] = g_gate[i] + g[i] * src[i];
        }
    }

    // Through the gate sigmoid into the 7x7 convolution.
    let mut g_conv_out = FeatureMap::zeros(1, f_str.height(), f_str.width());
    {
        let dst = g_conv_out.channel_mut(0);
        for i in 0..plane {
            dst[i] = g_gate[i] * sigmoid_grad_from_output(gate_plane[i]);
        }
    }
    let (g_subset, gate_grads) = conv2d_backward(&cache.subset, &params.gate, 3, 1, &g_conv_out)?;

    // Scatter subset gradients back onto the selected channels.
    for (slot, &ch) in cache.selected.iter().enumerate() {
        let gs = g_subset.channel(slot);
        let dst = g_f_str.channel_mut(ch);
        for i in 0..plane {
            dst[i] = dst[i] + gs[i];
        }
    }
    Ok(EpgGrads {
        f_str: g_f_str,
        perturb: ConvGrads::zeros_like(&params.perturb),
        gate: gate_grads,
    })
}
