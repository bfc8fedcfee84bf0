//! Composition root: configuration, deterministic parameter
//! initialization, the four-stage forward pass, and the full reverse pass.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{epg_backward, epg_forward, EntropyReport, EntropySign, EpgCache, EpgParams};
use crate::postproc::{
    redistribute, redistribute_backward, PostprocCache, PostprocParams,
};
use crate::preproc::{preproc_backward, preproc_forward, PreprocParams, StageSpec};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{seeded_init, split_channels, ConvGrads, FeatureMap};
use crate::topology::{str_backward, str_forward, Hypergraph, StrCache, StrGrads, StrParams};

/// Working precision of the numeric kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Complete run configuration. Serialized field names are the exact keys
/// accepted in config files and echoed into manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C1")]
    pub c1: usize,
    #[serde(rename = "C2")]
    pub c2: usize,
    #[serde(rename = "C3")]
    pub c3: usize,
    #[serde(rename = "C4")]
    pub c4: usize,
    #[serde(rename = "Cs")]
    pub cs: usize,
    pub k: usize,
    pub d: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    #[serde(rename = "K")]
    pub select_k: usize,
    pub entropy_sign: EntropySign,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            h: 224,
            w: 224,
            c1: 64,
            c2: 128,
            c3: 320,
            c4: 512,
            cs: 32,
            k: 8,
            d: 1,
            epsilon: 0.0,
            alpha: 0.0,
            beta: 0.0,
            mu: 3.99,
            select_k: 64,
            entropy_sign: EntropySign::Literal,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Quantities derived from a valid configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derived {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H_t")]
    pub h_t: usize,
    #[serde(rename = "W_t")]
    pub w_t: usize,
    pub n_nodes: usize,
}

impl PipelineConfig {
    /// Small verification preset: the smallest geometry on which the node
    /// grid still supports `k = 2` dilated selection (a 32-pixel side
    /// would collapse the grid to a single node).
    pub fn tiny() -> Self {
        Self {
            h: 64,
            w: 64,
            c1: 8,
            c2: 12,
            c3: 16,
            c4: 20,
            cs: 4,
            k: 2,
            d: 1,
            select_k: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &'static str, reason: String| Error::InvalidConfig { field, reason };
        if self.h == 0 || !self.h.is_multiple_of(32) {
            return Err(field("H", format!("{} must be a positive multiple of 32", self.h)));
        }
        if self.w == 0 || !self.w.is_multiple_of(32) {
            return Err(field("W", format!("{} must be a positive multiple of 32", self.w)));
        }
        for (name, c) in [("C1", self.c1), ("C2", self.c2), ("C3", self.c3), ("C4", self.c4)] {
            if c == 0 {
                return Err(Error::InvalidConfig {
                    field: name,
                    reason: "stage channel count must be >= 1".into(),
                });
            }
        }
        if self.cs == 0 {
            return Err(field("Cs", "compressed channel count must be >= 1".into()));
        }
        if self.select_k == 0 || self.select_k > 4 * self.cs {
            return Err(field(
                "K",
                format!("{} outside 1..={} (4*Cs)", self.select_k, 4 * self.cs),
            ));
        }
        let n_nodes = (self.h / 32) * (self.w / 32);
        if self.k == 0 {
            return Err(field("k", "neighbor count must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(field("d", "dilation must be >= 1".into()));
        }
        if self.k * self.d >= n_nodes {
            return Err(field(
                "k",
                format!(
                    "k*d = {} must be < n_nodes = {} (grid {}x{})",
                    self.k * self.d,
                    n_nodes,
                    self.h / 32,
                    self.w / 32
                ),
            ));
        }
        if !(self.mu > 0.0 && self.mu <= 4.0) {
            return Err(field("mu", format!("{} outside (0, 4]", self.mu)));
        }
        if !self.epsilon.is_finite() || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(field("epsilon", "scalar parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn derived(&self) -> Derived {
        Derived {
            c: 4 * self.cs,
            h_t: self.h / 32,
            w_t: self.w / 32,
            n_nodes: (self.h / 32) * (self.w / 32),
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        [self.c1, self.c2, self.c3, self.c4]
    }

    /// Native (height, width) of stage `i` (0-based): side `H / 2^(i+2)`.
    pub fn stage_dims(&self) -> [(usize, usize); 4] {
        std::array::from_fn(|i| (self.h >> (i + 2), self.w >> (i + 2)))
    }
}

/// Names of the differentiable parameter groups, in initialization order.
pub const PARAM_NAMES: [&str; 29] = [
    "compress_1_w",
    "compress_1_b",
    "compress_2_w",
    "compress_2_b",
    "compress_3_w",
    "compress_3_b",
    "compress_4_w",
    "compress_4_b",
    "refine_w",
    "refine_b",
    "norm_scale",
    "norm_shift",
    "alpha",
    "beta",
    "epsilon",
    "update_w",
    "update_b",
    "perturb_w",
    "perturb_b",
    "gate_w",
    "gate_b",
    "restore_1_w",
    "restore_1_b",
    "restore_2_w",
    "restore_2_b",
    "restore_3_w",
    "restore_3_b",
    "restore_4_w",
    "restore_4_b",
];

/// An immutable, fully initialized pipeline instance.
#[derive(Debug, Clone)]
pub struct Pipeline<T> {
    config: PipelineConfig,
    pub preproc: PreprocParams<T>,
    pub topo: StrParams<T>,
    pub epg: EpgParams<T>,
    pub post: PostprocParams<T>,
}

/// Wall-clock stage timings of one forward pass, milliseconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTimings {
    pub preproc_ms: f64,
    pub topology_ms: f64,
    pub gating_ms: f64,
    pub postproc_ms: f64,
    pub total_ms: f64,
}

/// Everything a forward pass produces, plus the reverse-pass cache.
#[derive(Debug, Clone)]
pub struct PipelineRun<T> {
    pub outputs: [FeatureMap<T>; 4],
    pub f_str: FeatureMap<T>,
    pub f_epg: FeatureMap<T>,
    pub graph: Hypergraph,
    /// Gate values per hyperedge in neighbor order, `n_nodes x k`, 64-bit.
    pub edge_gates: Vec<f64>,
    pub report: EntropyReport,
    pub timings: StageTimings,
    cache: RunCache<T>,
}

#[derive(Debug, Clone)]
struct RunCache<T> {
    fused: FeatureMap<T>,
    str_cache: StrCache<T>,
    epg_cache: EpgCache<T>,
    post_cache: PostprocCache<T>,
}

/// The complete gradient set of one backward pass.
#[derive(Debug, Clone)]
pub struct PipelineGrads<T> {
    pub inputs: [FeatureMap<T>; 4],
    pub compress: [ConvGrads<T>; 4],
    pub alpha: T,
    pub beta: T,
    pub epsilon: T,
    pub refine: ConvGrads<T>,
    pub update: ConvGrads<T>,
    pub norm_scale: Vec<T>,
    pub norm_shift: Vec<T>,
    pub perturb: ConvGrads<T>,
    pub gate: ConvGrads<T>,
    pub restore: [ConvGrads<T>; 4],
}

impl<T: Scalar> PipelineGrads<T> {
    /// Gradient slice for a named parameter group.
    pub fn param(&self, name: &str) -> Result<&[T]> {
        let slice: &[T] = match name {
            "compress_1_w" => &self.compress[0].weights,
            "compress_1_b" => &self.compress[0].bias,
            "compress_2_w" => &self.compress[1].weights,
            "compress_2_b" => &self.compress[1].bias,
            "compress_3_w" => &self.compress[2].weights,
            "compress_3_b" => &self.compress[2].bias,
            "compress_4_w" => &self.compress[3].weights,
            "compress_4_b" => &self.compress[3].bias,
            "refine_w" => &self.refine.weights,
            "refine_b" => &self.refine.bias,
            "norm_scale" => &self.norm_scale,
            "norm_shift" => &self.norm_shift,
            "alpha" => std::slice::from_ref(&self.alpha),
            "beta" => std::slice::from_ref(&self.beta),
            "epsilon" => std::slice::from_ref(&self.epsilon),
            "update_w" => &self.update.weights,
            "update_b" => &self.update.bias,
            "perturb_w" => &self.perturb.weights,
            "perturb_b" => &self.perturb.bias,
            "gate_w" => &self.gate.weights,
            "gate_b" => &self.gate.bias,
            "restore_1_w" => &self.restore[0].weights,
            "restore_1_b" => &self.restore[0].bias,
            "restore_2_w" => &self.restore[1].weights,
            "restore_2_b" => &self.restore[1].bias,
            "restore_3_w" => &self.restore[2].weights,
            "restore_3_b" => &self.restore[2].bias,
            "restore_4_w" => &self.restore[3].weights,
            "restore_4_b" => &self.restore[3].bias,
            "mu" | "k" | "d" | "K" => {
                return Err(Error::NotDifferentiable { name: name.into() })
            }
            _ => return Err(Error::UnknownParameter { name: name.into() }),
        };
        Ok(slice)
    }
}

impl<T: Scalar> Pipeline<T> {
    /// Validate the configuration and initialize every kernel
    /// deterministically from the seed. Initialization order is fixed:
    /// compress 1-4, refine, update, perturb, gate, restore 1-4.
    pub fn build(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let der = config.derived();
        let c = der.c;
        let mut rng = SplitMix64::new(config.seed);

        let stage_channels = config.stage_channels();
        let stage_dims = config.stage_dims();
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(StageSpec {
                stage_index: i + 1,
                in_channels: stage_channels[i],
                in_height: stage_dims[i].0,
                in_width: stage_dims[i].1,
                compress: seeded_init(config.cs, stage_channels[i], 1, 1, 1, &mut rng)?,
            });
        }
        let stages: [StageSpec<T>; 4] = stages.try_into().expect("4 stages");
        let preproc = PreprocParams {
            cs: config.cs,
            target_h: der.h_t,
            target_w: der.w_t,
            stages,
        };

        let topo = StrParams {
            alpha: T::from_f64(config.alpha),
            beta: T::from_f64(config.beta),
            epsilon: T::from_f64(config.epsilon),
            k: config.k,
            dilation: config.d,
            refine: seeded_init(c, c, 3, 3, 1, &mut rng)?,
            update: seeded_init(c, c, 1, 1, 1, &mut rng)?,
            norm_scale: vec![T::one(); c],
            norm_shift: vec![T::zero(); c],
        };

        let epg = EpgParams {
            mu: config.mu,
            select_k: config.select_k,
            perturb: seeded_init(c, c, 3, 3, c, &mut rng)?,
            gate: seeded_init(1, config.select_k, 7, 7, 1, &mut rng)?,
            sign: config.entropy_sign,
        };

        let mut restore = Vec::with_capacity(4);
        for &out_c in &stage_channels {
            restore.push(seeded_init(out_c, config.cs, 3, 3, 1, &mut rng)?);
        }
        let post = PostprocParams {
            cs: config.cs,
            restore: restore.try_into().expect("4 stages"),
            stage_dims,
        };

        Ok(Self {
            config,
            preproc,
            topo,
            epg,
            post,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Total count of differentiable scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for s in &self.preproc.stages {
            n += s.compress.parameter_count();
        }
        n += self.topo.refine.parameter_count();
        n += self.topo.update.parameter_count();
        n += self.topo.norm_scale.len() + self.topo.norm_shift.len();
        n += 3; // alpha, beta, epsilon
        n += self.epg.perturb.parameter_count();
        n += self.epg.gate.parameter_count();
        for k in &self.post.restore {
            n += k.parameter_count();
        }
        n
    }

    /// Stage features drawn uniformly from `[0, 1)` in stage order, so the
    /// inputs resemble normalized activations.
    pub fn synthetic_inputs(&self, seed: u64) -> [FeatureMap<T>; 4] {
        let mut rng = SplitMix64::new(seed);
        std::array::from_fn(|i| {
            let s = &self.preproc.stages[i];
            let mut m = FeatureMap::zeros(s.in_channels, s.in_height, s.in_width);
            m.fill_uniform(&mut rng);
            m
        })
    }

    /// Read access to a named parameter group.
    pub fn param(&self, name: &str) -> Result<&[T]> {
        let slice: &[T] = match name {
            "compress_1_w" => &self.preproc.stages[0].compress.weights,
            "compress_1_b" => &self.preproc.stages[0].compress.bias,
            "compress_2_w" => &self.preproc.stages[1].compress.weights,
            "compress_2_b" => &self.preproc.stages[1].compress.bias,
            "compress_3_w" => &self.preproc.stages[2].compress.weights,
            "compress_3_b" => &self.preproc.stages[2].compress.bias,
            "compress_4_w" => &self.preproc.stages[3].compress.weights,
            "compress_4_b" => &self.preproc.stages[3].compress.bias,
            "refine_w" => &self.topo.refine.weights,
            "refine_b" => &self.topo.refine.bias,
            "norm_scale" => &self.topo.norm_scale,
            "norm_shift" => &self.topo.norm_shift,
            "alpha" => std::slice::from_ref(&self.topo.alpha),
            "beta" => std::slice::from_ref(&self.topo.beta),
            "epsilon" => std::slice::from_ref(&self.topo.epsilon),
            "update_w" => &self.topo.update.weights,
            "update_b" => &self.topo.update.bias,
            "perturb_w" => &self.epg.perturb.weights,
            "perturb_b" => &self.epg.perturb.bias,
            "gate_w" => &self.epg.gate.weights,
            "gate_b" => &self.epg.gate.bias,
            "restore_1_w" => &self.post.restore[0].weights,
            "restore_1_b" => &self.post.restore[0].bias,
            "restore_2_w" => &self.post.restore[1].weights,
            "restore_2_b" => &self.post.restore[1].bias,
            "restore_3_w" => &self.post.restore[2].weights,
            "restore_3_b" => &self.post.restore[2].bias,
            "restore_4_w" => &self.post.restore[3].weights,
            "restore_4_b" => &self.post.restore[3].bias,
            "mu" | "k" | "d" | "K" => {
                return Err(Error::NotDifferentiable { name: name.into() })
            }
            _ => return Err(Error::UnknownParameter { name: name.into() }),
        };
        Ok(slice)
    }

    /// Mutable access to a named parameter group (used by gradient checks).
    pub fn param_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let slice: &mut [T] = match name {
            "compress_1_w" => &mut self.preproc.stages[0].compress.weights,
            "compress_1_b" => &mut self.preproc.stages[0].compress.bias,
            "compress_2_w" => &mut self.preproc.stages[1].compress.weights,
            "compress_2_b" => &mut self.preproc.stages[1].compress.bias,
            "compress_3_w" => &mut self.preproc.stages[2].compress.weights,
            "compress_3_b" => &mut self.preproc.stages[2].compress.bias,
            "compress_4_w" => &mut self.preproc.stages[3].compress.weights,
            "compress_4_b" => &mut self.preproc.stages[3].compress.bias,
            "refine_w" => &mut self.topo.refine.weights,
            "refine_b" => &mut self.topo.refine.bias,
            "norm_scale" => &mut self.topo.norm_scale,
            "norm_shift" => &mut self.topo.norm_shift,
            "alpha" => std::slice::from_mut(&mut self.topo.alpha),
            "beta" => std::slice::from_mut(&mut self.topo.beta),
            "epsilon" => std::slice::from_mut(&mut self.topo.epsilon),
            "update_w" => &mut self.topo.update.weights,
            "update_b" => &mut self.topo.update.bias,
            "perturb_w" => &mut self.epg.perturb.weights,
            "perturb_b" => &mut self.epg.perturb.bias,
            "gate_w" => &mut self.epg.gate.weights,
            "gate_b" => &mut self.epg.gate.bias,
            "restore_1_w" => &mut self.post.restore[0].weights,
            "restore_1_b" => &mut self.post.restore[0].bias,
            "restore_2_w" => &mut self.post.restore[1].weights,
            "restore_2_b" => &mut self.post.restore[1].bias,
            "restore_3_w" => &mut self.post.restore[2].weights,
            "restore_3_b" => &mut self.post.restore[2].bias,
            "restore_4_w" => &mut self.post.restore[3].weights,
            "restore_4_b" => &mut self.post.restore[3].bias,
            "mu" | "k" | "d" | "K" => {
                return Err(Error::NotDifferentiable { name: name.into() })
            }
            _ => return Err(Error::UnknownParameter { name: name.into() }),
        };
        Ok(slice)
    }

    /// Execute the full forward pass. Inputs must match the configured
    /// stage geometry; every stage output is checked finite.
    pub fn forward(&self, inputs: &[FeatureMap<T>; 4]) -> Result<PipelineRun<T>> {
        let t0 = Instant::now();
        let (fused, aligned) = preproc_forward(inputs, &self.preproc)?;
        if !fused.all_finite() {
            return Err(Error::NonFinite { stage: "preproc" });
        }
        let t1 = Instant::now();
        let (f_str, str_cache) = str_forward(&fused, &self.topo)?;
        if !f_str.all_finite() {
            return Err(Error::NonFinite { stage: "topology" });
        }
        let t2 = Instant::now();
        let (f_epg, report, epg_cache) = epg_forward(&f_str, &self.epg)?;
        if !f_epg.all_finite() {
            return Err(Error::NonFinite { stage: "gating" });
        }
        let t3 = Instant::now();
        let (outputs, post_cache) = redistribute(&f_epg, &aligned, &self.post)?;
        for out in &outputs {
            if !out.all_finite() {
                return Err(Error::NonFinite { stage: "postproc" });
            }
        }
        let t4 = Instant::now();

        let graph = str_cache.graph.clone();
        let edge_gates = str_cache
            .edge_gates()
            .iter()
            .map(|g| g.as_f64())
            .collect();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        let timings = StageTimings {
            preproc_ms: ms(t0, t1),
            topology_ms: ms(t1, t2),
            gating_ms: ms(t2, t3),
            postproc_ms: ms(t3, t4),
            total_ms: ms(t0, t4),
        };
        Ok(PipelineRun {
            outputs,
            f_str,
            f_epg,
            graph,
            edge_gates,
            report,
            timings,
            cache: RunCache {
                fused,
                str_cache,
                epg_cache,
                post_cache,
            },
        })
    }

    /// Reverse pass through all four stages with the discrete selections
    /// (hypergraph topology, channel set) held fixed.
    pub fn backward(
        &self,
        inputs: &[FeatureMap<T>; 4],
        run: &PipelineRun<T>,
        grad_outputs: &[FeatureMap<T>; 4],
    ) -> Result<PipelineGrads<T>> {
        let post = redistribute_backward(&run.cache.post_cache, &self.post, grad_outputs)?;
        let epg = epg_backward(&run.f_str, &self.epg, &run.cache.epg_cache, &post.f_epg)?;
        let StrGrads {
            f_concat: g_fused,
            alpha,
            beta,
            epsilon,
            refine,
            update,
            norm_scale,
            norm_shift,
        } = str_backward(&run.cache.fused, &self.topo, &run.cache.str_cache, &epg.f_str)?;

        // The aligned maps feed both the fuse concat and the residual path.
        let fused_groups = split_channels(&g_fused, &[self.preproc.cs; 4])?;
        let mut grad_aligned = Vec::with_capacity(4);
        for (g_split, g_residual) in fused_groups.into_iter().zip(post.aligned.iter()) {
            let mut g = g_split;
            for (a, b) in g.data_mut().iter_mut().zip(g_residual.data()) {
                *a = *a + *b;
            }
            grad_aligned.push(g);
        }
        let grad_aligned: [FeatureMap<T>; 4] = grad_aligned.try_into().expect("4 stages");
        let pre = preproc_backward(inputs, &self.preproc, &grad_aligned)?;

        Ok(PipelineGrads {
            inputs: pre.inputs,
            compress: pre.compress,
            alpha,
            beta,
            epsilon,
            refine,
            update,
            norm_scale,
            norm_shift,
            perturb: epg.perturb,
            gate: epg.gate,
            restore: post.restore,
        })
    }
}
