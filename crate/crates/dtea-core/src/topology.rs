//! Dynamic-topology feature mixing: refine the fused map, lift it to a
//! position-encoded node matrix, build a dilated-KNN hypergraph over cosine
//! distance, aggregate each hyperedge with similarity gates, update every
//! node from the hyperedges containing it, and lower back to a feature map.
//!
//! The reverse pass differentiates everything except the discrete neighbor
//! selection, which is piecewise constant in the inputs and held fixed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid_grad_from_output, sigmoid_scalar, Scalar};
use crate::tensor::{conv2d, conv2d_backward, ConvGrads, ConvKernel, FeatureMap};

/// Work size (inner products counted elementwise) above which per-node
/// loops run on the thread pool. Writes are disjoint per node, so the
/// parallel result is bit-identical to the sequential one.
const PAR_WORK_THRESHOLD: usize = 1 << 17;

/// A flattened spatial grid: one node per pixel, one feature vector per
/// node, row-major (`node = row * grid_w + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix<T> {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    /// `n_nodes x dim`, row-major.
    features: Vec<T>,
}

impl<T: Scalar> NodeMatrix<T> {
    /// The feature dimension must be even: the position encoding splits it
    /// into a row half and a column half.
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, features: Vec<T>) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::OddNodeDim { dim });
        }
        let expected = grid_h * grid_w * dim;
        if features.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "NodeMatrix::new",
                expected: format!("{} x {dim} features", grid_h * grid_w),
                got: format!("{} values", features.len()),
            });
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            features,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.grid_h * self.grid_w
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    /// Grid coordinates of a node index.
    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node / self.grid_w, node % self.grid_w)
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }
}

/// One hyperedge: a center node and its ordered neighbor list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub center: usize,
    pub neighbors: Vec<usize>,
}

/// One hyperedge per node, each centered on its own node index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypergraph {
    pub n_nodes: usize,
    pub k: usize,
    pub dilation: usize,
    pub hyperedges: Vec<Hyperedge>,
}

impl Hypergraph {
    /// Check the structural invariants: one hyperedge per node, centered on
    /// it, with `k` distinct valid neighbors that exclude the center.
    pub fn validate(&self) -> Result<()> {
        if self.hyperedges.len() != self.n_nodes {
            return Err(Error::ShapeMismatch {
                context: "Hypergraph::validate",
                expected: format!("{} hyperedges", self.n_nodes),
                got: format!("{}", self.hyperedges.len()),
            });
        }
        for (i, e) in self.hyperedges.iter().enumerate() {
            if e.center != i {
                return Err(Error::IndexOutOfRange {
                    index: e.center,
                    len: i,
                });
            }
            if e.neighbors.len() != self.k {
                return Err(Error::ShapeMismatch {
                    context: "Hypergraph::validate",
                    expected: format!("{} neighbors", self.k),
                    got: format!("{}", e.neighbors.len()),
                });
            }
            let mut seen = vec![false; self.n_nodes];
            for &j in &e.neighbors {
                if j >= self.n_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: j,
                        len: self.n_nodes,
                    });
                }
                if j == e.center || seen[j] {
                    return Err(Error::ShapeMismatch {
                        context: "Hypergraph::validate",
                        expected: "distinct neighbors excluding center".into(),
                        got: format!("duplicate or self index {j}"),
                    });
                }
                seen[j] = true;
            }
        }
        Ok(())
    }
}

/// Parameters of the topology stage.
#[derive(Debug, Clone)]
pub struct StrParams<T> {
    /// Similarity-gate slope (learnable).
    pub alpha: T,
    /// Similarity-gate offset (learnable).
    pub beta: T,
    /// Self-feature modulation factor in the node update.
    pub epsilon: T,
    pub k: usize,
    pub dilation: usize,
    /// 3x3, C -> C, applied with padding 1 before normalization.
    pub refine: ConvKernel<T>,
    /// 1x1 over the node feature dimension (D -> D), shared across nodes.
    pub update: ConvKernel<T>,
    /// Per-channel normalization scale, length C.
    pub norm_scale: Vec<T>,
    /// Per-channel normalization shift, length C.
    pub norm_shift: Vec<T>,
}

/// Per-hyperedge aggregation results: the aggregated vectors plus the
/// gates and cosine similarities they were built from (kept for the
/// reverse pass and for export).
#[derive(Debug, Clone)]
pub struct EdgeFeatures<T> {
    pub n_edges: usize,
    pub dim: usize,
    pub k: usize,
    /// `n_edges x dim`.
    pub features: Vec<T>,
    /// `n_edges x k`, gate of each neighbor in list order.
    pub gates: Vec<T>,
    /// `n_edges x k`, cosine similarity center <-> neighbor, 64-bit.
    pub cosines: Vec<f64>,
}

impl<T: Scalar> EdgeFeatures<T> {
    pub fn edge(&self, e: usize) -> &[T] {
        &self.features[e * self.dim..(e + 1) * self.dim]
    }
}

/// Cosine similarity in 64-bit with index-order accumulation. Either
/// vector being all-zero defines the similarity as 0.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        let x = a[i].as_f64();
        let y = b[i].as_f64();
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Fixed 2D sinusoidal position encoding for a `grid_h x grid_w` grid,
/// returned as `n_nodes x dim` in 64-bit.
///
/// The first `dim/2` components encode the row, the last `dim/2` the
/// column. Within an axis's block, component `j` uses the angle
/// `(coord / side) / 10000^(2*(j/2) / (dim/2))`, with `sin` on even `j`
/// and `cos` on odd `j`.
pub fn position_encoding(dim: usize, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::OddNodeDim { dim });
    }
    let half = dim / 2;
    let axis = |coord: usize, side: usize, out: &mut Vec<f64>| {
        let norm = coord as f64 / side as f64;
        for j in 0..half {
            let p = j / 2;
            let freq = 10000f64.powf(2.0 * p as f64 / half as f64);
            let angle = norm / freq;
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    };
    let mut enc = Vec::with_capacity(grid_h * grid_w * dim);
    for row in 0..grid_h {
        for col in 0..grid_w {
            axis(row, grid_h, &mut enc);
            axis(col, grid_w, &mut enc);
        }
    }
    Ok(enc)
}

/// Lift a feature map to a node matrix and add the position encoding.
/// Node `row * W + col` takes the pixel's channel vector; the encoding is
/// computed in 64-bit and cast to the working precision before the add.
pub fn to_nodes<T: Scalar>(refined: &FeatureMap<T>) -> Result<NodeMatrix<T>> {
    let (c, h, w) = refined.shape();
    let enc = position_encoding(c, h, w)?;
    let mut features = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            let node = row * w + col;
            for ch in 0..c {
                features.push(refined.at(ch, row, col) + T::from_f64(enc[node * c + ch]));
            }
        }
    }
    NodeMatrix::new(h, w, c, features)
}

/// Inverse indexing of [`to_nodes`]: node features back to a
/// `dim x grid_h x grid_w` map. Position encodings are not subtracted.
pub fn from_nodes<T: Scalar>(nodes: &NodeMatrix<T>) -> FeatureMap<T> {
    let (h, w, d) = (nodes.grid_h(), nodes.grid_w(), nodes.dim());
    FeatureMap::from_fn(d, h, w, |c, row, col| nodes.node(row * w + col)[c])
}

/// Dilated K-nearest-neighbor hypergraph over cosine distance.
///
/// Each center ranks all other nodes by `1 - cosine_sim` ascending, ties
/// broken by lower node index, and takes ranks `1, 1+d, ..., 1+(k-1)*d`.
pub fn dilated_knn<T: Scalar>(nodes: &NodeMatrix<T>, k: usize, d: usize) -> Result<Hypergraph> {
    let n = nodes.n_nodes();
    if k == 0 || d == 0 || k * d >= n {
        return Err(Error::NeighborBudget {
            k,
            dilation: d,
            n_nodes: n,
        });
    }
    let build = |center: usize| -> Hyperedge {
        let cu = nodes.node(center);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != center)
            .map(|j| (1.0 - cosine_sim(cu, nodes.node(j)), j))
            .collect();
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Hyperedge {
            center,
            neighbors: (0..k).map(|m| cand[m * d].1).collect(),
        }
    };
    let hyperedges: Vec<Hyperedge> = if n * n * nodes.dim() >= PAR_WORK_THRESHOLD {
        (0..n).into_par_iter().map(build).collect()
    } else {
        (0..n).map(build).collect()
    };
    Ok(Hypergraph {
        n_nodes: n,
        k,
        dilation: d,
        hyperedges,
    })
}

fn check_graph_nodes<T: Scalar>(nodes: &NodeMatrix<T>, graph: &Hypergraph) -> Result<()> {
    if graph.n_nodes != nodes.n_nodes() || graph.hyperedges.len() != nodes.n_nodes() {
        return Err(Error::ShapeMismatch {
            context: "hypergraph",
            expected: format!("{} nodes", nodes.n_nodes()),
            got: format!("{} ({} hyperedges)", graph.n_nodes, graph.hyperedges.len()),
        });
    }
    Ok(())
}

/// Aggregate each hyperedge: `h_e = x + sum_j gate_j * x_j` with
/// `gate_j = sigmoid(alpha * c_j + beta)` and `c_j` the cosine similarity
/// between the center and neighbor `j`. Neighbors are summed in list order.
pub fn hyperedge_aggregate<T: Scalar>(
    nodes: &NodeMatrix<T>,
    graph: &Hypergraph,
    params: &StrParams<T>,
) -> Result<EdgeFeatures<T>> {
    check_graph_nodes(nodes, graph)?;
    let n = nodes.n_nodes();
    let dim = nodes.dim();
    let k = graph.k;
    let mut features = vec![T::zero(); n * dim];
    let mut gates = vec![T::zero(); n * k];
    let mut cosines = vec![0.0f64; n * k];

    for (e, edge) in graph.hyperedges.iter().enumerate() {
        if edge.center >= n {
            return Err(Error::IndexOutOfRange {
                index: edge.center,
                len: n,
            });
        }
        let xc = nodes.node(edge.center);
        let he = &mut features[e * dim..(e + 1) * dim];
        he.copy_from_slice(xc);
        for (m, &j) in edge.neighbors.iter().enumerate() {
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, len: n });
            }
            let xj = nodes.node(j);
            let c = cosine_sim(xc, xj);
            let gate = sigmoid_scalar(params.alpha * T::from_f64(c) + params.beta);
            cosines[e * k + m] = c;
            gates[e * k + m] = gate;
            for t in 0..dim {
                he[t] = he[t] + gate * xj[t];
            }
        }
    }
    Ok(EdgeFeatures {
        n_edges: n,
        dim,
        k,
        features,
        gates,
        cosines,
    })
}

/// For each node, the hyperedges containing it (as center or neighbor), in
/// ascending edge order.
fn membership(graph: &Hypergraph) -> Vec<Vec<usize>> {
    let mut member = vec![Vec::new(); graph.n_nodes];
    for (e, edge) in graph.hyperedges.iter().enumerate() {
        member[edge.center].push(e);
        for &j in &edge.neighbors {
            member[j].push(e);
        }
    }
    member
}

/// Forward trace of the node update, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct NodeUpdateTrace<T> {
    /// Pre-kernel mix `m = (1+eps)*x + sum of member hyperedge vectors`.
    pub mixed: Vec<T>,
    /// Post-sigmoid node features.
    pub updated: Vec<T>,
}

fn check_update_kernel<T: Scalar>(update: &ConvKernel<T>, dim: usize) -> Result<()> {
    if update.in_channels != dim
        || update.out_channels != dim
        || update.kernel_h != 1
        || update.kernel_w != 1
        || update.groups != 1
    {
        return Err(Error::InvalidKernel {
            reason: format!(
                "node update kernel must be 1x1 dense {dim}->{dim}, got {}x{} {}->{} groups {}",
                update.kernel_h,
                update.kernel_w,
                update.in_channels,
                update.out_channels,
                update.groups
            ),
        });
    }
    Ok(())
}

fn node_update_trace<T: Scalar>(
    nodes: &NodeMatrix<T>,
    edges: &EdgeFeatures<T>,
    graph: &Hypergraph,
    params: &StrParams<T>,
) -> Result<NodeUpdateTrace<T>> {
    check_graph_nodes(nodes, graph)?;
    let n = nodes.n_nodes();
    let dim = nodes.dim();
    if edges.n_edges != n || edges.dim != dim {
        return Err(Error::ShapeMismatch {
            context: "node_update",
            expected: format!("{n} x {dim} edge features"),
            got: format!("{} x {}", edges.n_edges, edges.dim),
        });
    }
    check_update_kernel(&params.update, dim)?;
    let member = membership(graph);
    let self_scale = T::one() + params.epsilon;

    let mut mixed = vec![T::zero(); n * dim];
    let fill_mixed = |i: usize, mi: &mut [T]| {
        let x = nodes.node(i);
        for t in 0..dim {
            mi[t] = self_scale * x[t];
        }
        for &e in &member[i] {
            let he = edges.edge(e);
            for t in 0..dim {
                mi[t] = mi[t] + he[t];
            }
        }
    };
    // Hyperedge membership is bounded by k+1 per node on KNN graphs but can
    // be larger on hand-built ones; size the work estimate conservatively.
    if n * dim * (graph.k + 2) >= PAR_WORK_THRESHOLD {
        mixed
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(i, mi)| fill_mixed(i, mi));
    } else {
        for (i, mi) in mixed.chunks_mut(dim).enumerate() {
            fill_mixed(i, mi);
        }
    }

    let weights = &params.update.weights;
    let bias = &params.update.bias;
    let mut updated = vec![T::zero(); n * dim];
    let fill_updated = |i: usize, yi: &mut [T]| {
        let mi = &mixed[i * dim..(i + 1) * dim];
        for od in 0..dim {
            let row = &weights[od * dim..(od + 1) * dim];
            let mut acc = bias[od];
            for t in 0..dim {
                acc = acc + row[t] * mi[t];
            }
            yi[od] = sigmoid_scalar(acc);
        }
    };
    if n * dim * dim >= PAR_WORK_THRESHOLD {
        updated
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(i, yi)| fill_updated(i, yi));
    } else {
        for (i, yi) in updated.chunks_mut(dim).enumerate() {
            fill_updated(i, yi);
        }
    }
    Ok(NodeUpdateTrace { mixed, updated })
}

/// Update every node: mix its own (modulated) features with all hyperedges
/// containing it, apply the shared 1x1 kernel over the feature dimension,
/// then a sigmoid. Coordinates are unchanged.
pub fn node_update<T: Scalar>(
    nodes: &NodeMatrix<T>,
    edges: &EdgeFeatures<T>,
    graph: &Hypergraph,
    params: &StrParams<T>,
) -> Result<NodeMatrix<T>> {
    let trace = node_update_trace(nodes, edges, graph, params)?;
    NodeMatrix::new(nodes.grid_h(), nodes.grid_w(), nodes.dim(), trace.updated)
}

fn check_norm_params<T: Scalar>(params: &StrParams<T>, channels: usize) -> Result<()> {
    if params.norm_scale.len() != channels || params.norm_shift.len() != channels {
        return Err(Error::ShapeMismatch {
            context: "refine normalization",
            expected: format!("{channels} scale/shift entries"),
            got: format!(
                "{} / {}",
                params.norm_scale.len(),
                params.norm_shift.len()
            ),
        });
    }
    Ok(())
}

const NORM_EPS: f64 = 1e-5;

struct NormTrace<T> {
    /// Standardized values before scale/shift.
    normed: FeatureMap<T>,
    /// Per-channel `1 / sqrt(var + eps)`.
    inv_std: Vec<f64>,
    refined: FeatureMap<T>,
}

/// Per-channel instance normalization over spatial positions: subtract the
/// channel mean, divide by `sqrt(var + 1e-5)` (biased variance), then
/// apply the learnable scale and shift. Statistics accumulate in 64-bit.
fn instance_norm<T: Scalar>(x: &FeatureMap<T>, params: &StrParams<T>) -> Result<NormTrace<T>> {
    check_norm_params(params, x.channels())?;
    let plane = x.height() * x.width();
    let mut normed = FeatureMap::zeros(x.channels(), x.height(), x.width());
    let mut refined = FeatureMap::zeros(x.channels(), x.height(), x.width());
    let mut inv_std = vec![0.0f64; x.channels()];
    for (c, inv_slot) in inv_std.iter_mut().enumerate() {
        let src = x.channel(c);
        let mut sum = 0.0f64;
        for &v in src {
            sum += v.as_f64();
        }
        let mean = sum / plane as f64;
        let mut var = 0.0f64;
        for &v in src {
            let d = v.as_f64() - mean;
            var += d * d;
        }
        var /= plane as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        *inv_slot = inv;
        let mean_t = T::from_f64(mean);
        let inv_t = T::from_f64(inv);
        let (scale, shift) = (params.norm_scale[c], params.norm_shift[c]);
        for (n, &v) in normed.channel_mut(c).iter_mut().zip(src) {
            *n = (v - mean_t) * inv_t;
        }
        let nd = normed.channel(c);
        for (r, &n) in refined.channel_mut(c).iter_mut().zip(nd) {
            *r = n * scale + shift;
        }
    }
    Ok(NormTrace {
        normed,
        inv_std,
        refined,
    })
}

/// 3x3 refinement convolution (padding 1) followed by instance
/// normalization with learnable per-channel scale and shift.
pub fn refine<T: Scalar>(f_concat: &FeatureMap<T>, params: &StrParams<T>) -> Result<FeatureMap<T>> {
    let conv_out = conv2d(f_concat, &params.refine, 1, 1)?;
    Ok(instance_norm(&conv_out, params)?.refined)
}

/// Everything the reverse pass needs from a topology forward.
#[derive(Debug, Clone)]
pub struct StrCache<T> {
    pub graph: Hypergraph,
    normed: FeatureMap<T>,
    inv_std: Vec<f64>,
    nodes: NodeMatrix<T>,
    node_norms: Vec<f64>,
    edges: EdgeFeatures<T>,
    trace: NodeUpdateTrace<T>,
}

impl<T: Scalar> StrCache<T> {
    /// Gate values per hyperedge in neighbor-list order (for export).
    pub fn edge_gates(&self) -> &[T] {
        &self.edges.gates
    }
    pub fn edge_k(&self) -> usize {
        self.edges.k
    }
}

/// Full topology stage: refine, lift to nodes, build the hypergraph,
/// aggregate, update, and lower back to a `C x H x W` map. Returns the
/// output, and a cache holding the hypergraph and reverse-pass state.
pub fn str_forward<T: Scalar>(
    f_concat: &FeatureMap<T>,
    params: &StrParams<T>,
) -> Result<(FeatureMap<T>, StrCache<T>)> {
    let conv_out = conv2d(f_concat, &params.refine, 1, 1)?;
    let norm = instance_norm(&conv_out, params)?;
    let nodes = to_nodes(&norm.refined)?;
    let graph = dilated_knn(&nodes, params.k, params.dilation)?;
    let edges = hyperedge_aggregate(&nodes, &graph, params)?;
    let trace = node_update_trace(&nodes, &edges, &graph, params)?;
    let updated = NodeMatrix::new(
        nodes.grid_h(),
        nodes.grid_w(),
        nodes.dim(),
        trace.updated.clone(),
    )?;
    let f_str = from_nodes(&updated);

    let node_norms = (0..nodes.n_nodes())
        .map(|i| {
            let mut s = 0.0f64;
            for &v in nodes.node(i) {
                let x = v.as_f64();
                s += x * x;
            }
            s.sqrt()
        })
        .collect();
    Ok((
        f_str,
        StrCache {
            graph,
            normed: norm.normed,
            inv_std: norm.inv_std,
            nodes,
            node_norms,
            edges,
            trace,
        },
    ))
}

/// Gradients produced by [`str_backward`].
#[derive(Debug, Clone)]
pub struct StrGrads<T> {
    pub f_concat: FeatureMap<T>,
    pub alpha: T,
    pub beta: T,
    pub epsilon: T,
    pub refine: ConvGrads<T>,
    pub update: ConvGrads<T>,
    pub norm_scale: Vec<T>,
    pub norm_shift: Vec<T>,
}

/// Reverse-mode differentiation of [`str_forward`] with the hypergraph
/// topology held fixed. `f_concat` must be the forward input and `cache`
/// the forward's cache.
pub fn str_backward<T: Scalar>(
    f_concat: &FeatureMap<T>,
    params: &StrParams<T>,
    cache: &StrCache<T>,
    grad_f_str: &FeatureMap<T>,
) -> Result<StrGrads<T>> {
    let nodes = &cache.nodes;
    let n = nodes.n_nodes();
    let dim = nodes.dim();
    let (h, w) = (nodes.grid_h(), nodes.grid_w());
    if grad_f_str.shape() != (dim, h, w) {
        return Err(Error::ShapeMismatch {
            context: "str_backward",
            expected: format!("{dim}x{h}x{w} upstream gradient"),
            got: format!(
                "{}x{}x{}",
                grad_f_str.channels(),
                grad_f_str.height(),
                grad_f_str.width()
            ),
        });
    }

    // Upstream map -> node layout, then through the final sigmoid.
    let y = &cache.trace.updated;
    let mut g_z = vec![T::zero(); n * dim];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            for c in 0..dim {
                g_z[i * dim + c] =
                    grad_f_str.at(c, row, col) * sigmoid_grad_from_output(y[i * dim + c]);
            }
        }
    }

    // Shared 1x1 update kernel: z = W m + b per node.
    let weights = &params.update.weights;
    let mut update_grads = ConvGrads::zeros_like(&params.update);
    let mut g_m = vec![T::zero(); n * dim];
    for i in 0..n {
        let gz = &g_z[i * dim..(i + 1) * dim];
        let mi = &cache.trace.mixed[i * dim..(i + 1) * dim];
        let gm = &mut g_m[i * dim..(i + 1) * dim];
        for od in 0..dim {
            let g = gz[od];
            update_grads.bias[od] = update_grads.bias[od] + g;
            if g == T::zero() {
                continue;
            }
            let wrow = &weights[od * dim..(od + 1) * dim];
            let gwrow = &mut update_grads.weights[od * dim..(od + 1) * dim];
            for t in 0..dim {
                gwrow[t] = gwrow[t] + g * mi[t];
                gm[t] = gm[t] + g * wrow[t];
            }
        }
    }

    // Mix: m_i = (1+eps) x_i + sum of member hyperedges.
    let self_scale = T::one() + params.epsilon;
    let mut g_nodes = vec![T::zero(); n * dim];
    let mut g_eps = T::zero();
    for i in 0..n {
        let gm = &g_m[i * dim..(i + 1) * dim];
        let x = nodes.node(i);
        let gn = &mut g_nodes[i * dim..(i + 1) * dim];
        for t in 0..dim {
            gn[t] = gn[t] + self_scale * gm[t];
            g_eps = g_eps + gm[t] * x[t];
        }
    }
    // g_he[e] = sum of g_m over the edge's center and neighbors.
    let mut g_he = vec![T::zero(); n * dim];
    for (e, edge) in cache.graph.hyperedges.iter().enumerate() {
        let ghe = &mut g_he[e * dim..(e + 1) * dim];
        let gc = &g_m[edge.center * dim..(edge.center + 1) * dim];
        for t in 0..dim {
            ghe[t] = ghe[t] + gc[t];
        }
        for &j in &edge.neighbors {
            let gj = &g_m[j * dim..(j + 1) * dim];
            for t in 0..dim {
                ghe[t] = ghe[t] + gj[t];
            }
        }
    }

    // Aggregate: h_e = x_c + sum_j gate_j x_j, gate_j = sigmoid(alpha c_j + beta).
    let mut g_alpha = T::zero();
    let mut g_beta = T::zero();
    let k = cache.edges.k;
    for (e, edge) in cache.graph.hyperedges.iter().enumerate() {
        let ghe = &g_he[e * dim..(e + 1) * dim];
        let c_idx = edge.center;
        for t in 0..dim {
            g_nodes[c_idx * dim + t] = g_nodes[c_idx * dim + t] + ghe[t];
        }
        let xc = nodes.node(c_idx);
        let nc = cache.node_norms[c_idx];
        for (m, &j) in edge.neighbors.iter().enumerate() {
            let xj = nodes.node(j);
            let gate = cache.edges.gates[e * k + m];
            let cj = cache.edges.cosines[e * k + m];
            let mut g_gate = T::zero();
            for t in 0..dim {
                g_gate = g_gate + ghe[t] * xj[t];
                g_nodes[j * dim + t] = g_nodes[j * dim + t] + gate * ghe[t];
            }
            let g_pre = g_gate * sigmoid_grad_from_output(gate);
            g_alpha = g_alpha + g_pre * T::from_f64(cj);
            g_beta = g_beta + g_pre;
            // Cosine backward; an all-zero vector pins the similarity at 0,
            // so its gradient contribution is zero.
            let nj = cache.node_norms[j];
            if nc == 0.0 || nj == 0.0 {
                continue;
            }
            let g_c = (g_pre * params.alpha).as_f64();
            if g_c == 0.0 {
                continue;
            }
            let inv_cn = 1.0 / (nc * nj);
            for t in 0..dim {
                let u = xc[t].as_f64();
                let v = xj[t].as_f64();
                let du = v * inv_cn - cj * u / (nc * nc);
                let dv = u * inv_cn - cj * v / (nj * nj);
                g_nodes[c_idx * dim + t] =
                    g_nodes[c_idx * dim + t] + T::from_f64(g_c * du);
                g_nodes[j * dim + t] = g_nodes[j * dim + t] + T::from_f64(g_c * dv);
            }
        }
    }

    // Nodes -> refined map (the position encoding is an additive constant).
    let g_refined = FeatureMap::from_fn(dim, h, w, |c, row, col| g_nodes[(row * w + col) * dim + c]);

    // Instance-norm backward (biased variance, eps inside the sqrt).
    let plane = h * w;
    let mut g_conv = FeatureMap::zeros(dim, h, w);
    let mut g_scale = vec![T::zero(); dim];
    let mut g_shift = vec![T::zero(); dim];
    for c in 0..dim {
        let gr = g_refined.channel(c);
        let xhat = cache.normed.channel(c);
        let scale = params.norm_scale[c];
        let mut gs = T::zero();
        let mut gb = T::zero();
        let mut sum_gx = 0.0f64;
        let mut sum_gx_xhat = 0.0f64;
        for i in 0..plane {
            gs = gs + gr[i] * xhat[i];
            gb = gb + gr[i];
            let gxh = (gr[i] * scale).as_f64();
            sum_gx += gxh;
            sum_gx_xhat += gxh * xhat[i].as_f64();
        }
        g_scale[c] = gs;
        g_shift[c] = gb;
        let mean_gx = T::from_f64(sum_gx / plane as f64);
        let mean_gx_xhat = T::from_f64(sum_gx_xhat / plane as f64);
        let inv = T::from_f64(cache.inv_std[c]);
        let out = g_conv.channel_mut(c);
        for i in 0..plane {
            out[i] = inv * (gr[i] * scale - mean_gx - xhat[i] * mean_gx_xhat);
        }
    }

    let (g_f_concat, refine_grads) = conv2d_backward(f_concat, &params.refine, 1, 1, &g_conv)?;
    Ok(StrGrads {
        f_concat: g_f_concat,
        alpha: g_alpha,
        beta: g_beta,
        epsilon: g_eps,
        refine: refine_grads,
        update: update_grads,
        norm_scale: g_scale,
        norm_shift: g_shift,
    })
}
