//! Joint metric space over hypothesis nodes: semantic embedding, structural
//! encoding and uncertainty fused into one mixed distance, then sparsified
//! into a KNN graph with percentile truncation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HypothesisGraph, NodeId};
use crate::providers::Embedder;
use crate::relation::{RelationParams, RelationTable};

/// Confidence floor inside the uncertainty term `-ln(c + EPS)`.
pub const CONFIDENCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    /// Unit-L2-norm semantic embedding.
    pub semantic: Vec<f64>,
    /// [progress, bfs depth (normalized), degree centrality], z-scored
    /// per instance; a zero-variance component becomes all zeros.
    pub structural: [f64; 3],
    /// -ln(confidence + 1e-6).
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricParams {
    /// Semantic weight.
    pub alpha: f64,
    /// Structural weight.
    pub beta: f64,
    /// Uncertainty weight.
    pub nu: f64,
    /// Neighbors per vertex before symmetrization.
    pub k: usize,
    /// Nearest-rank percentile for global edge truncation.
    pub tau_percentile: f64,
    pub relation: RelationParams,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            alpha: 0.6,
            beta: 0.3,
            nu: 0.1,
            k: 15,
            tau_percentile: 95.0,
            relation: RelationParams::default(),
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta + self.nu - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha+beta+nu must equal 1, got {}",
                self.alpha + self.beta + self.nu
            )));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.tau_percentile > 0.0 && self.tau_percentile <= 100.0) {
            return Err(Error::Config(format!(
                "tau_percentile must be in (0,100], got {}",
                self.tau_percentile
            )));
        }
        Ok(())
    }
}

/// Symmetrized, percentile-truncated KNN graph under the mixed distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseMetricGraph {
    pub n: usize,
    /// (u, v, weight) with u < v, at most one edge per pair.
    pub edges: Vec<(NodeId, NodeId, f64)>,
    /// Nearest-rank percentile value used for truncation.
    pub tau_value: f64,
}

impl SparseMetricGraph {
    pub fn adjacency(&self) -> Vec<Vec<(NodeId, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v, w) in &self.edges {
            adj[u as usize].push((v, w));
            adj[v as usize].push((u, w));
        }
        for list in &mut adj {
            list.sort_by(|a, b| a.0.cmp(&b.0));
        }
        adj
    }

    pub fn max_weight(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.2)
            .fold(0.0, f64::max)
    }
}

/// Full symmetric pairwise distance table.
#[derive(Debug, Clone)]
pub struct DistMatrix {
    pub n: usize,
    data: Vec<f64>,
}

impl DistMatrix {
    /// Builds from a flat row-major n*n table.
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        DistMatrix { n, data }
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> f64 {
        self.data[i as usize * self.n + j as usize]
    }
}

/// Everything downstream stages need from the metric construction.
#[derive(Debug, Clone)]
pub struct MetricSpace {
    pub features: Vec<NodeFeatures>,
    pub dist: DistMatrix,
    pub graph: SparseMetricGraph,
    pub warnings: Vec<String>,
}

/// Assembles per-node feature vectors.
///
/// Structural components are computed on the adjacency-only graph: BFS depth
/// is a multi-source BFS from every path-start node along directed edges,
/// normalized by the deepest observed level; degree centrality is
/// degree/(|V|-1).
pub fn compute_features(
    graph: &HypothesisGraph,
    embedder: &dyn Embedder,
) -> Result<Vec<NodeFeatures>> {
    let n = graph.nodes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let canons: Vec<String> = graph.nodes.iter().map(|nd| nd.canon.clone()).collect();
    let mut semantics = embedder.embed(&canons)?;
    for (i, v) in semantics.iter_mut().enumerate() {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Provider(format!(
                "embedder returned a non-normalizable vector for node {i}"
            )));
        }
        if (norm - 1.0).abs() > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    }

    let depths = bfs_depths(graph);
    let max_depth = depths.iter().copied().max().unwrap_or(0);
    let mut raw: Vec<[f64; 3]> = Vec::with_capacity(n);
    let degrees = graph.degrees();
    for (i, node) in graph.nodes.iter().enumerate() {
        let depth_norm = if max_depth == 0 {
            0.0
        } else {
            depths[i] as f64 / max_depth as f64
        };
        let centrality = if n > 1 {
            degrees[i] as f64 / (n - 1) as f64
        } else {
            0.0
        };
        raw.push([node.progress, depth_norm, centrality]);
    }
    let structural = zscore_columns(&raw);

    Ok(graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| NodeFeatures {
            semantic: std::mem::take(&mut semantics[i]),
            structural: structural[i],
            uncertainty: -(node.confidence + CONFIDENCE_EPS).ln(),
        })
        .collect())
}

fn bfs_depths(graph: &HypothesisGraph) -> Vec<usize> {
    let n = graph.nodes.len();
    let adj = graph.out_adjacency();
    let mut depth = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for start in graph.start_nodes() {
        depth[start as usize] = 0;
        queue.push_back(start);
    }
    while let Some(u) = queue.pop_front() {
        let du = depth[u as usize];
        for &v in &adj[u as usize] {
            if depth[v as usize] == usize::MAX {
                depth[v as usize] = du + 1;
                queue.push_back(v);
            }
        }
    }
    let max_seen = depth
        .iter()
        .filter(|&&d| d != usize::MAX)
        .copied()
        .max()
        .unwrap_or(0);
    for d in &mut depth {
        if *d == usize::MAX {
            *d = max_seen + 1;
        }
    }
    depth
}

fn zscore_columns(raw: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = raw.len() as f64;
    let mut out = vec![[0.0; 3]; raw.len()];
    for c in 0..3 {
        let mean: f64 = raw.iter().map(|r| r[c]).sum::<f64>() / n;
        let var: f64 = raw.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 {
            for (i, r) in raw.iter().enumerate() {
                out[i][c] = (r[c] - mean) / std;
            }
        }
    }
    out
}

/// The mixed distance
/// `alpha*(1-<e_i,e_j>) + beta*||phi_i-phi_j||_1 + nu*(u_i+u_j) + delta*R`,
/// clamped at zero (SUPPORT can otherwise push the total negative).
pub fn mixed_distance(
    i: NodeId,
    j: NodeId,
    features: &[NodeFeatures],
    params: &MetricParams,
    relations: &RelationTable,
) -> f64 {
    let fi = &features[i as usize];
    let fj = &features[j as usize];
    let dot: f64 = fi
        .semantic
        .iter()
        .zip(&fj.semantic)
        .map(|(a, b)| a * b)
        .sum();
    let l1: f64 = fi
        .structural
        .iter()
        .zip(&fj.structural)
        .map(|(a, b)| (a - b).abs())
        .sum();
    let rel = if i == j {
        0.0
    } else {
        relations.term(i, j, &params.relation) * params.relation.delta_logic
    };
    let d = params.alpha * (1.0 - dot)
        + params.beta * l1
        + params.nu * (fi.uncertainty + fj.uncertainty)
        + rel;
    d.max(0.0)
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Builds the full distance table, the symmetrized KNN edge set, and the
/// percentile-truncated sparse graph in one pass.
pub fn build_metric_space(
    features: &[NodeFeatures],
    params: &MetricParams,
    relations: &RelationTable,
) -> Result<MetricSpace> {
    params.validate()?;
    let n = features.len();
    let mut warnings = Vec::new();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d = mixed_distance(i as NodeId, j as NodeId, features, params, relations);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    let dist = DistMatrix { n, data };

    let mut edges: Vec<(NodeId, NodeId, f64)> = Vec::new();
    let mut tau_value = 0.0;
    if n >= 2 {
        let k = if params.k > n - 1 {
            warnings.push(format!(
                "k={} clamped to {} (only {} vertices)",
                params.k,
                n - 1,
                n
            ));
            n - 1
        } else {
            params.k
        };
        let mut edge_set = std::collections::BTreeSet::new();
        for i in 0..n {
            let mut order: Vec<NodeId> = (0..n as NodeId).filter(|&j| j as usize != i).collect();
            order.sort_by(|&a, &b| {
                dist.get(i as NodeId, a)
                    .total_cmp(&dist.get(i as NodeId, b))
                    .then(a.cmp(&b))
            });
            for &j in order.iter().take(k) {
                let u = (i as NodeId).min(j);
                let v = (i as NodeId).max(j);
                edge_set.insert((u, v));
            }
        }
        let mut weights: Vec<f64> = edge_set
            .iter()
            .map(|&(u, v)| dist.get(u, v))
            .collect();
        weights.sort_by(f64::total_cmp);
        tau_value = nearest_rank(&weights, params.tau_percentile);
        edges = edge_set
            .into_iter()
            .map(|(u, v)| (u, v, dist.get(u, v)))
            .filter(|&(_, _, w)| w <= tau_value)
            .collect();
    }

    Ok(MetricSpace {
        features: features.to_vec(),
        dist,
        graph: SparseMetricGraph { n, edges, tau_value },
        warnings,
    })
}
