//! Multi-scale feature preprocessing: per-stage channel compression with a
//! 1x1 convolution, bilinear alignment to the deepest stage's resolution,
//! and channel concatenation of the four aligned maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, resize_bilinear, resize_bilinear_backward,
    ConvGrads, ConvKernel, FeatureMap,
};

/// Geometry and compression kernel for one encoder stage.
#[derive(Debug, Clone)]
pub struct StageSpec<T> {
    /// 1-based stage index; stage i has side length `H / 2^(i+1)`.
    pub stage_index: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// 1x1 kernel mapping `in_channels` down to the shared width `Cs`.
    pub compress: ConvKernel<T>,
}

/// Preprocessing parameters: the shared channel width, the target
/// resolution (stage 4's), and the four stage specs.
#[derive(Debug, Clone)]
pub struct PreprocParams<T> {
    pub cs: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub stages: [StageSpec<T>; 4],
}

impl<T: Scalar> PreprocParams<T> {
    /// Concatenated channel count: four stages of `Cs` channels each.
    pub fn fused_channels(&self) -> usize {
        4 * self.cs
    }
}

fn check_stage_input<T: Scalar>(f: &FeatureMap<T>, spec: &StageSpec<T>) -> Result<()> {
    if f.shape() != (spec.in_channels, spec.in_height, spec.in_width) {
        return Err(Error::ShapeMismatch {
            context: "compress_and_align",
            expected: format!(
                "stage {} input {}x{}x{}",
                spec.stage_index, spec.in_channels, spec.in_height, spec.in_width
            ),
            got: format!("{}x{}x{}", f.channels(), f.height(), f.width()),
        });
    }
    Ok(())
}

/// Compress one stage's channels to `Cs` with its 1x1 kernel, then align
/// spatially to the target resolution with bilinear resampling.
pub fn compress_and_align<T: Scalar>(
    f: &FeatureMap<T>,
    spec: &StageSpec<T>,
    params: &PreprocParams<T>,
) -> Result<FeatureMap<T>> {
    check_stage_input(f, spec)?;
    let compressed = conv2d(f, &spec.compress, 0, 1)?;
    resize_bilinear(&compressed, params.target_h, params.target_w)
}

/// Adjoint of [`compress_and_align`]: gradient w.r.t. the stage input and
/// the compression kernel, given the gradient on the aligned output.
pub fn compress_and_align_backward<T: Scalar>(
    f: &FeatureMap<T>,
    spec: &StageSpec<T>,
    grad_aligned: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, ConvGrads<T>)> {
    check_stage_input(f, spec)?;
    let grad_compressed = resize_bilinear_backward(grad_aligned, spec.in_height, spec.in_width);
    conv2d_backward(f, &spec.compress, 0, 1, &grad_compressed)
}

/// Concatenate the four aligned maps in stage order 1..4.
pub fn fuse_scales<T: Scalar>(
    aligned: &[FeatureMap<T>; 4],
    params: &PreprocParams<T>,
) -> Result<FeatureMap<T>> {
    for (i, m) in aligned.iter().enumerate() {
        if m.shape() != (params.cs, params.target_h, params.target_w) {
            return Err(Error::ShapeMismatch {
                context: "fuse_scales",
                expected: format!(
                    "{}x{}x{} aligned map",
                    params.cs, params.target_h, params.target_w
                ),
                got: format!(
                    "stage {}: {}x{}x{}",
                    i + 1,
                    m.channels(),
                    m.height(),
                    m.width()
                ),
            });
        }
    }
    concat_channels(aligned)
}

/// Full preprocessing stage. Returns the fused map and the four aligned
/// maps (the latter feed the residual path in postprocessing).
pub fn preproc_forward<T: Scalar>(
    inputs: &[FeatureMap<T>; 4],
    params: &PreprocParams<T>,
) -> Result<(FeatureMap<T>, [FeatureMap<T>; 4])> {
    let aligned = [
        compress_and_align(&inputs[0], &params.stages[0], params)?,
        compress_and_align(&inputs[1], &params.stages[1], params)?,
        compress_and_align(&inputs[2], &params.stages[2], params)?,
        compress_and_align(&inputs[3], &params.stages[3], params)?,
    ];
    let fused = fuse_scales(&aligned, params)?;
    Ok((fused, aligned))
}

/// Per-stage gradients flowing out of preprocessing.
#[derive(Debug, Clone)]
pub struct PreprocGrads<T> {
    pub inputs: [FeatureMap<T>; 4],
    pub compress: [ConvGrads<T>; 4],
}

/// Adjoint of [`preproc_forward`]. `grad_aligned` must already accumulate
/// every consumer of the aligned maps (the fused split and the residual
/// path), so fusing's own adjoint — splitting the fused gradient — happens
/// at the call site.
pub fn preproc_backward<T: Scalar>(
    inputs: &[FeatureMap<T>; 4],
    params: &PreprocParams<T>,
    grad_aligned: &[FeatureMap<T>; 4],
) -> Result<PreprocGrads<T>> {
    let mut input_grads = Vec::with_capacity(4);
    let mut kernel_grads = Vec::with_capacity(4);
    for i in 0..4 {
        let (gi, gk) =
            compress_and_align_backward(&inputs[i], &params.stages[i], &grad_aligned[i])?;
        input_grads.push(gi);
        kernel_grads.push(gk);
    }
    let [g1, g2, g3, g4] = input_grads.try_into().map_err(|_| Error::ShapeMismatch {
        context: "preproc_backward",
        expected: "4 gradients".into(),
        got: "other".into(),
    })?;
    let [k1, k2, k3, k4] = kernel_grads.try_into().map_err(|_| Error::ShapeMismatch {
        context: "preproc_backward",
        expected: "4 kernel gradients".into(),
        got: "other".into(),
    })?;
    Ok(PreprocGrads {
        inputs: [g1, g2, g3, g4],
        compress: [k1, k2, k3, k4],
    })
}
