//! JSON artifact schemas. All documents carry `schema_version = 1` and
//! serialize with stable field order, so identical runs produce
//! byte-identical files (the manifest's wall-clock timings being the one
//! intentionally run-dependent section).

use std::path::Path;

use serde::{Deserialize, Serialize};

use dtea_core::gating::{EntropyReport, EntropySign};
use dtea_core::pipeline::{Pipeline, PipelineConfig, PipelineRun, StageTimings};
use dtea_core::scalar::Scalar;
use dtea_core::topology::Hypergraph;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

pub const STAGE_FILES: [&str; 4] = ["stage_1.dtt", "stage_2.dtt", "stage_3.dtt", "stage_4.dtt"];
pub const HYPERGRAPH_FILE: &str = "hypergraph.json";
pub const ENTROPY_FILE: &str = "entropy.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a run's stage features came from. A manifest with a synthetic
/// source replays exactly; a file source replays as long as the files
/// still exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputSpec {
    Synthetic { seed: u64 },
    Files { stage_paths: [String; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedInfo {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H_t")]
    pub h_t: usize,
    #[serde(rename = "W_t")]
    pub w_t: usize,
    pub n_nodes: usize,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub stages: [String; 4],
    pub hypergraph: String,
    pub entropy: String,
}

/// Everything needed to reproduce and locate a run's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub derived: DerivedInfo,
    pub input: InputSpec,
    pub outputs: OutputSpec,
    pub timings_ms: StageTimings,
}

impl RunManifest {
    pub fn new<T: Scalar>(
        pipeline: &Pipeline<T>,
        input: InputSpec,
        timings: StageTimings,
    ) -> Self {
        let cfg = pipeline.config();
        let der = cfg.derived();
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            derived: DerivedInfo {
                c: der.c,
                h_t: der.h_t,
                w_t: der.w_t,
                n_nodes: der.n_nodes,
                parameter_count: pipeline.parameter_count(),
            },
            input,
            outputs: OutputSpec {
                stages: STAGE_FILES.map(str::to_string),
                hypergraph: HYPERGRAPH_FILE.to_string(),
                entropy: ENTROPY_FILE.to_string(),
            },
            timings_ms: timings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeJson {
    pub center: usize,
    pub neighbors: Vec<usize>,
    /// Similarity gate per neighbor, same order as `neighbors`.
    pub gates: Vec<f64>,
}

/// Standalone hypergraph document: grid geometry, selection parameters,
/// and one center/neighbors/gates record per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergraphJson {
    pub schema_version: u32,
    pub grid: GridDims,
    pub k: usize,
    pub d: usize,
    pub hyperedges: Vec<HyperedgeJson>,
}

impl HypergraphJson {
    pub fn from_run<T: Scalar>(run: &PipelineRun<T>, grid: GridDims) -> Self {
        let k = run.graph.k;
        let hyperedges = run
            .graph
            .hyperedges
            .iter()
            .enumerate()
            .map(|(e, edge)| HyperedgeJson {
                center: edge.center,
                neighbors: edge.neighbors.clone(),
                gates: run.edge_gates[e * k..(e + 1) * k].to_vec(),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            grid,
            k,
            d: run.graph.dilation,
            hyperedges,
        }
    }

    /// Structural validation: defers to the core hypergraph invariants,
    /// then checks the gates' count and open-interval bounds.
    pub fn validate(&self) -> Result<(), String> {
        let graph = Hypergraph {
            n_nodes: self.grid.h * self.grid.w,
            k: self.k,
            dilation: self.d,
            hyperedges: self
                .hyperedges
                .iter()
                .map(|e| dtea_core::topology::Hyperedge {
                    center: e.center,
                    neighbors: e.neighbors.clone(),
                })
                .collect(),
        };
        graph.validate().map_err(|e| e.to_string())?;
        for edge in &self.hyperedges {
            if edge.gates.len() != self.k {
                return Err(format!(
                    "hyperedge at {} has {} gates, expected {}",
                    edge.center,
                    edge.gates.len(),
                    self.k
                ));
            }
            for &g in &edge.gates {
                if !(g > 0.0 && g < 1.0) {
                    return Err(format!("gate {g} at node {} escapes (0,1)", edge.center));
                }
            }
        }
        Ok(())
    }
}

/// Standalone channel-entropy document with both sign conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyJson {
    pub schema_version: u32,
    pub mu: f64,
    #[serde(rename = "K")]
    pub select_k: usize,
    /// Which sign convention drove the selection below.
    pub sign: EntropySign,
    /// Mean of `P ln P` per channel (nonpositive).
    pub scores: Vec<f64>,
    /// The same scores negated (conventional entropy sign).
    pub scores_conventional: Vec<f64>,
    /// Selected channel indices, strictly ascending.
    pub selected: Vec<usize>,
}

impl EntropyJson {
    pub fn from_report(report: &EntropyReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mu: report.mu,
            select_k: report.select_k,
            sign: report.sign,
            scores: report.scores.clone(),
            scores_conventional: report.scores.iter().map(|s| -s).collect(),
            selected: report.selected.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.select_k == 0 || self.select_k > self.scores.len() {
            return Err(format!(
                "K = {} outside 1..={}",
                self.select_k,
                self.scores.len()
            ));
        }
        if self.selected.len() != self.select_k {
            return Err(format!(
                "{} selected indices, expected {}",
                self.selected.len(),
                self.select_k
            ));
        }
        if !self.selected.windows(2).all(|w| w[0] < w[1]) {
            return Err("selected indices not strictly ascending".into());
        }
        if let Some(&i) = self.selected.iter().find(|&&i| i >= self.scores.len()) {
            return Err(format!("selected index {i} out of range"));
        }
        for (a, b) in self.scores.iter().zip(&self.scores_conventional) {
            if (a + b).abs() > 1e-9 {
                return Err(format!("score pair {a} / {b} are not negations"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Per-stage timing statistics, keyed by the pipeline stage names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchStages {
    pub preproc: StageStats,
    pub topology: StageStats,
    pub gating: StageStats,
    pub postproc: StageStats,
    pub total: StageStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchJson {
    pub schema_version: u32,
    pub reps: usize,
    pub stages: BenchStages,
}

/// Serialize any artifact document with a trailing newline.
pub fn to_json_file<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Input(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn from_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("cannot parse {}: {e}", path.display())))
}
