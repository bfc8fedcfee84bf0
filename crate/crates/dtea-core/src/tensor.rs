//! Dense-tensor substrate: storage, 2D convolution, bilinear resize,
//! channel concat/split, activations, and deterministic initialization.
//!
//! All operations are pure functions of their inputs. Where a loop is
//! parallelized, each thread writes a disjoint output region and the
//! per-region computation is sequential, so results are bit-identical
//! to the single-threaded order regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::{sigmoid_scalar, Scalar};

/// Dense rank-3 feature map, `channels x height x width`, row-major with
/// the channel dimension outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "FeatureMap::new",
                expected: format!("{channels}x{height}x{width} = {expected} elements"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> T {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[(c * self.height + h) * self.width + w]
    }

    /// One channel's `height x width` plane.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Fill with uniform `[0, 1)` draws in storage order.
    pub fn fill_uniform(&mut self, rng: &mut SplitMix64) {
        for v in &mut self.data {
            *v = T::from_f64(rng.next_f64());
        }
    }
}

/// 2D convolution kernel. `groups = 1` is a dense convolution,
/// `groups = in_channels` is depthwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub groups: usize,
    /// `out_channels x (in_channels/groups) x kernel_h x kernel_w`, row-major.
    pub weights: Vec<T>,
    /// One bias per output channel.
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        groups: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::InvalidKernel {
                reason: format!(
                    "groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}"
                ),
            });
        }
        let expected = out_channels * (in_channels / groups) * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::InvalidKernel {
                reason: format!("expected {expected} weights, got {}", weights.len()),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidKernel {
                reason: format!("expected {out_channels} biases, got {}", bias.len()),
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            groups,
            weights,
            bias,
        })
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        groups: usize,
    ) -> Self {
        let weights = vec![T::zero(); out_channels * (in_channels / groups) * kernel_h * kernel_w];
        let bias = vec![T::zero(); out_channels];
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            groups,
            weights,
            bias,
        }
    }

    /// 1x1 kernel whose weight matrix is the identity over `channels`.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 1, 1);
        for c in 0..channels {
            k.weights[c * channels + c] = T::one();
        }
        k
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    #[inline]
    pub fn weight_at(&self, oc: usize, ic_in_group: usize, kh: usize, kw: usize) -> T {
        let ipg = self.in_per_group();
        self.weights[((oc * ipg + ic_in_group) * self.kernel_h + kh) * self.kernel_w + kw]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            groups: self.groups,
            weights: self
                .weights
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Gradients of a convolution's weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrads<T> {
    pub fn zeros_like(kernel: &ConvKernel<T>) -> Self {
        Self {
            weights: vec![T::zero(); kernel.weights.len()],
            bias: vec![T::zero(); kernel.bias.len()],
        }
    }
}

fn conv_output_dims<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    padding: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if input.channels() != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            context: "conv2d",
            expected: kernel.in_channels,
            got: input.channels(),
        });
    }
    debug_assert!(stride >= 1);
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
    Ok((out_h, out_w))
}

/// Valid output-row range for one kernel row: `ih = oh*stride + kh - padding`
/// must land in `[0, in_h)`.
#[inline]
fn valid_out_range(out_len: usize, in_len: usize, k: usize, padding: usize, stride: usize) -> (usize, usize) {
    if k >= in_len + padding {
        // This kernel offset lands past the input for every output
        // position (possible when the kernel dwarfs the input).
        return (0, 0);
    }
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi_inclusive = (in_len + padding - k - 1) / stride;
    let hi = (hi_inclusive + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2D cross-correlation (no kernel flip) with zero padding.
///
/// Output is `out_channels x out_h x out_w` with
/// `out_h = (H + 2*padding - kernel_h)/stride + 1` and likewise for width.
pub fn conv2d<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    padding: usize,
    stride: usize,
) -> Result<FeatureMap<T>> {
    let (out_h, out_w) = conv_output_dims(input, kernel, padding, stride)?;
    let in_h = input.height();
    let in_w = input.width();
    let ipg = kernel.in_per_group();
    let opg = kernel.out_per_group();

    let mut out = FeatureMap::zeros(kernel.out_channels, out_h, out_w);
    let plane = out_h * out_w;

    let run_channel = |oc: usize, out_plane: &mut [T]| {
        out_plane.fill(kernel.bias[oc]);
        let group = oc / opg;
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let in_plane = input.channel(ic);
            for kh in 0..kernel.kernel_h {
                let (oh_lo, oh_hi) = valid_out_range(out_h, in_h, kh, padding, stride);
                for kw in 0..kernel.kernel_w {
                    let w = kernel.weight_at(oc, icg, kh, kw);
                    if w == T::zero() {
                        continue;
                    }
                    let (ow_lo, ow_hi) = valid_out_range(out_w, in_w, kw, padding, stride);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - padding;
                        let in_row = &in_plane[ih * in_w..(ih + 1) * in_w];
                        let out_row = &mut out_plane[oh * out_w..(oh + 1) * out_w];
                        if stride == 1 {
                            let iw0 = ow_lo + kw - padding;
                            let n = ow_hi - ow_lo;
                            let src = &in_row[iw0..iw0 + n];
                            let dst = &mut out_row[ow_lo..ow_lo + n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + w * *s;
                            }
                        } else {
                            let iw0 = ow_lo * stride + kw - padding;
                            let dst = &mut out_row[ow_lo..ow_hi];
                            let src = in_row[iw0..].iter().step_by(stride);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + w * *s;
                            }
                        }
                    }
                }
            }
        }
    };

    // Output channels are independent; parallelize only when the work
    // justifies the dispatch. Either path produces identical bits.
    let work = kernel.out_channels * plane * ipg * kernel.kernel_h * kernel.kernel_w;
    if work >= 1 << 17 && kernel.out_channels > 1 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(oc, out_plane)| run_channel(oc, out_plane));
    } else {
        for (oc, out_plane) in out.data_mut().chunks_mut(plane).enumerate() {
            run_channel(oc, out_plane);
        }
    }
    Ok(out)
}

/// Reverse-mode adjoint of [`conv2d`]: gradients with respect to the input,
/// the weights, and the bias, given the gradient on the output.
pub fn conv2d_backward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    padding: usize,
    stride: usize,
    grad_out: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, ConvGrads<T>)> {
    let (out_h, out_w) = conv_output_dims(input, kernel, padding, stride)?;
    if grad_out.shape() != (kernel.out_channels, out_h, out_w) {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward",
            expected: format!("{}x{}x{}", kernel.out_channels, out_h, out_w),
            got: format!(
                "{}x{}x{}",
                grad_out.channels(),
                grad_out.height(),
                grad_out.width()
            ),
        });
    }
    let in_h = input.height();
    let in_w = input.width();
    let ipg = kernel.in_per_group();
    let opg = kernel.out_per_group();

    let mut grad_in = FeatureMap::zeros(input.channels(), in_h, in_w);
    let mut grads = ConvGrads::zeros_like(kernel);

    for oc in 0..kernel.out_channels {
        let go_plane = grad_out.channel(oc);
        let mut bias_acc = T::zero();
        for &g in go_plane {
            bias_acc = bias_acc + g;
        }
        grads.bias[oc] = grads.bias[oc] + bias_acc;

        let group = oc / opg;
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let in_plane = input.channel(ic);
            for kh in 0..kernel.kernel_h {
                let (oh_lo, oh_hi) = valid_out_range(out_h, in_h, kh, padding, stride);
                for kw in 0..kernel.kernel_w {
                    let (ow_lo, ow_hi) = valid_out_range(out_w, in_w, kw, padding, stride);
                    let w = kernel.weight_at(oc, icg, kh, kw);
                    let mut w_acc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - padding;
                        for ow in ow_lo..ow_hi {
                            let iw = ow * stride + kw - padding;
                            let g = go_plane[oh * out_w + ow];
                            w_acc = w_acc + g * in_plane[ih * in_w + iw];
                            let gi = &mut grad_in.data_mut()[(ic * in_h + ih) * in_w + iw];
                            *gi = *gi + g * w;
                        }
                    }
                    let widx = ((oc * ipg + icg) * kernel.kernel_h + kh) * kernel.kernel_w + kw;
                    grads.weights[widx] = grads.weights[widx] + w_acc;
                }
            }
        }
    }
    Ok((grad_in, grads))
}

/// Per-axis bilinear tap: two source indices and the fractional weight of
/// the second one.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(dst_len: usize, src_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            // Half-pixel centers, clamped to the valid source range.
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers, per-channel independent.
pub fn resize_bilinear<T: Scalar>(
    input: &FeatureMap<T>,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureMap<T>> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::ShapeMismatch {
            context: "resize_bilinear",
            expected: "target dims >= 1".into(),
            got: format!("{target_h}x{target_w}"),
        });
    }
    if target_h == input.height() && target_w == input.width() {
        return Ok(input.clone());
    }
    let rows = bilinear_taps(target_h, input.height());
    let cols = bilinear_taps(target_w, input.width());
    let in_w = input.width();

    let mut out = FeatureMap::zeros(input.channels(), target_h, target_w);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (oh, ry) in rows.iter().enumerate() {
            let fy = T::from_f64(ry.frac);
            let top = &src[ry.lo * in_w..ry.lo * in_w + in_w];
            let bot = &src[ry.hi * in_w..ry.hi * in_w + in_w];
            let out_row = &mut dst[oh * target_w..(oh + 1) * target_w];
            for (ow, rx) in cols.iter().enumerate() {
                let fx = T::from_f64(rx.frac);
                let one = T::one();
                let a = top[rx.lo];
                let b = top[rx.hi];
                let c2 = bot[rx.lo];
                let d = bot[rx.hi];
                let up = (one - fx) * a + fx * b;
                let dn = (one - fx) * c2 + fx * d;
                out_row[ow] = (one - fy) * up + fy * dn;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters the output gradient back onto
/// the `src_h x src_w` source grid with the same taps and weights.
pub fn resize_bilinear_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    src_h: usize,
    src_w: usize,
) -> FeatureMap<T> {
    if grad_out.height() == src_h && grad_out.width() == src_w {
        return grad_out.clone();
    }
    let rows = bilinear_taps(grad_out.height(), src_h);
    let cols = bilinear_taps(grad_out.width(), src_w);
    let out_w = grad_out.width();

    let mut grad_in = FeatureMap::zeros(grad_out.channels(), src_h, src_w);
    for c in 0..grad_out.channels() {
        let go = grad_out.channel(c);
        let gi = grad_in.channel_mut(c);
        for (oh, ry) in rows.iter().enumerate() {
            let fy = T::from_f64(ry.frac);
            let one = T::one();
            for (ow, rx) in cols.iter().enumerate() {
                let fx = T::from_f64(rx.frac);
                let g = go[oh * out_w + ow];
                gi[ry.lo * src_w + rx.lo] =
                    gi[ry.lo * src_w + rx.lo] + (one - fy) * (one - fx) * g;
                gi[ry.lo * src_w + rx.hi] = gi[ry.lo * src_w + rx.hi] + (one - fy) * fx * g;
                gi[ry.hi * src_w + rx.lo] = gi[ry.hi * src_w + rx.lo] + fy * (one - fx) * g;
                gi[ry.hi * src_w + rx.hi] = gi[ry.hi * src_w + rx.hi] + fy * fx * g;
            }
        }
    }
    grad_in
}

/// Concatenate along the channel dimension, preserving input order.
pub fn concat_channels<T: Scalar>(inputs: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let first = inputs.first().ok_or(Error::ShapeMismatch {
        context: "concat_channels",
        expected: "at least one input".into(),
        got: "0 inputs".into(),
    })?;
    let (h, w) = (first.height(), first.width());
    let mut channels = 0;
    for m in inputs {
        if m.height() != h || m.width() != w {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                expected: format!("{h}x{w} spatial dims"),
                got: format!("{}x{}", m.height(), m.width()),
            });
        }
        channels += m.channels();
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for m in inputs {
        data.extend_from_slice(m.data());
    }
    FeatureMap::new(channels, h, w, data)
}

/// Split into contiguous channel groups; group sizes must sum to the input
/// channel count.
pub fn split_channels<T: Scalar>(
    input: &FeatureMap<T>,
    group_sizes: &[usize],
) -> Result<Vec<FeatureMap<T>>> {
    let sum: usize = group_sizes.iter().sum();
    if sum != input.channels() {
        return Err(Error::BadSplit {
            channels: input.channels(),
            sum,
        });
    }
    let plane = input.height() * input.width();
    let mut out = Vec::with_capacity(group_sizes.len());
    let mut offset = 0;
    for &g in group_sizes {
        let data = input.data()[offset * plane..(offset + g) * plane].to_vec();
        out.push(FeatureMap::new(g, input.height(), input.width(), data)?);
        offset += g;
    }
    Ok(out)
}

/// Elementwise logistic sigmoid, clamped to `[1e-7, 1 - 1e-7]`.
pub fn sigmoid<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    input.map(sigmoid_scalar)
}

/// Fan-in-scaled uniform initialization: weights uniform in `[-b, b]` with
/// `b = sqrt(6 / fan_in)`, bias zero. Deterministic given the generator state.
pub fn seeded_init<T: Scalar>(
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    groups: usize,
    rng: &mut SplitMix64,
) -> Result<ConvKernel<T>> {
    if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
        return Err(Error::InvalidKernel {
            reason: format!(
                "groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}"
            ),
        });
    }
    let fan_in = (in_channels / groups) * kernel_h * kernel_w;
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = out_channels * (in_channels / groups) * kernel_h * kernel_w;
    let weights = (0..n).map(|_| T::from_f64(rng.symmetric(bound))).collect();
    ConvKernel::new(
        out_channels,
        in_channels,
        kernel_h,
        kernel_w,
        groups,
        weights,
        vec![T::zero(); out_channels],
    )
}
