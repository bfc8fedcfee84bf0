//! Feature postprocessing: split the gated map into its four stage groups,
//! add the aligned stage features back (residual), resize each sum to the
//! stage's native resolution, and restore the stage channel count with a
//! 3x3 convolution.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, resize_bilinear, resize_bilinear_backward,
    split_channels, ConvGrads, ConvKernel, FeatureMap,
};

/// Restoration kernels and target geometry, one entry per stage.
#[derive(Debug, Clone)]
pub struct PostprocParams<T> {
    pub cs: usize,
    /// 3x3, Cs -> C_i, padding 1.
    pub restore: [ConvKernel<T>; 4],
    /// Native (height, width) per stage.
    pub stage_dims: [(usize, usize); 4],
}

/// Forward state kept for the reverse pass: the resized sums are the
/// restore convolutions' inputs, and the pre-resize resolution is needed
/// by the resize adjoint.
#[derive(Debug, Clone)]
pub struct PostprocCache<T> {
    pub resized: [FeatureMap<T>; 4],
    pub pre_dims: (usize, usize),
}

fn check_inputs<T: Scalar>(
    f_epg: &FeatureMap<T>,
    aligned: &[FeatureMap<T>; 4],
    params: &PostprocParams<T>,
) -> Result<()> {
    let (h, w) = (f_epg.height(), f_epg.width());
    if f_epg.channels() != 4 * params.cs {
        return Err(Error::ShapeMismatch {
            context: "redistribute",
            expected: format!("{} gated channels", 4 * params.cs),
            got: format!("{}", f_epg.channels()),
        });
    }
    for (i, a) in aligned.iter().enumerate() {
        if a.shape() != (params.cs, h, w) {
            return Err(Error::ShapeMismatch {
                context: "redistribute",
                expected: format!("{}x{h}x{w} aligned map", params.cs),
                got: format!(
                    "stage {}: {}x{}x{}",
                    i + 1,
                    a.channels(),
                    a.height(),
                    a.width()
                ),
            });
        }
        if params.restore[i].in_channels != params.cs {
            return Err(Error::InvalidKernel {
                reason: format!(
                    "restore kernel {} expects {} input channels, has {}",
                    i + 1,
                    params.cs,
                    params.restore[i].in_channels
                ),
            });
        }
    }
    Ok(())
}

/// Split, residual-add, resize, restore — one output per stage. Group `i`
/// of the channel split corresponds to stage `i` in fuse order.
pub fn redistribute<T: Scalar>(
    f_epg: &FeatureMap<T>,
    aligned: &[FeatureMap<T>; 4],
    params: &PostprocParams<T>,
) -> Result<([FeatureMap<T>; 4], PostprocCache<T>)> {
    check_inputs(f_epg, aligned, params)?;
    let groups = split_channels(f_epg, &[params.cs; 4])?;
    let mut outputs = Vec::with_capacity(4);
    let mut resized_all = Vec::with_capacity(4);
    for i in 0..4 {
        let mut sum = groups[i].clone();
        for (s, a) in sum.data_mut().iter_mut().zip(aligned[i].data()) {
            *s = *s + *a;
        }
        let (th, tw) = params.stage_dims[i];
        let resized = resize_bilinear(&sum, th, tw)?;
        outputs.push(conv2d(&resized, &params.restore[i], 1, 1)?);
        resized_all.push(resized);
    }
    let outputs: [FeatureMap<T>; 4] = outputs.try_into().expect("4 stages");
    let resized: [FeatureMap<T>; 4] = resized_all.try_into().expect("4 stages");
    Ok((
        outputs,
        PostprocCache {
            resized,
            pre_dims: (f_epg.height(), f_epg.width()),
        },
    ))
}

/// Gradients produced by [`redistribute_backward`]. The residual add fans
/// the same upstream value out to the gated group and the aligned map.
#[derive(Debug, Clone)]
pub struct PostprocGrads<T> {
    pub f_epg: FeatureMap<T>,
    pub aligned: [FeatureMap<T>; 4],
    pub restore: [ConvGrads<T>; 4],
}

/// Adjoint of [`redistribute`].
pub fn redistribute_backward<T: Scalar>(
    cache: &PostprocCache<T>,
    params: &PostprocParams<T>,
    grad_outputs: &[FeatureMap<T>; 4],
) -> Result<PostprocGrads<T>> {
    let (pre_h, pre_w) = cache.pre_dims;
    let mut g_groups = Vec::with_capacity(4);
    let mut g_aligned = Vec::with_capacity(4);
    let mut kernel_grads = Vec::with_capacity(4);
    for ((resized, restore), g_out) in cache.resized.iter().zip(&params.restore).zip(grad_outputs)
    {
        let (g_resized, g_kernel) = conv2d_backward(resized, restore, 1, 1, g_out)?;
        let g_sum = resize_bilinear_backward(&g_resized, pre_h, pre_w);
        g_aligned.push(g_sum.clone());
        g_groups.push(g_sum);
        kernel_grads.push(g_kernel);
    }
    let f_epg = concat_channels(&g_groups)?;
    let aligned: [FeatureMap<T>; 4] = g_aligned.try_into().expect("4 stages");
    let restore: [ConvGrads<T>; 4] = kernel_grads.try_into().expect("4 stages");
    Ok(PostprocGrads {
        f_epg,
        aligned,
        restore,
    })
}
