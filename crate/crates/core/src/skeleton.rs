//! Maps selected topological features back to the hypothesis graph:
//! thresholded subgraphs, cluster filtering, anchor selection, shortest-path
//! backbones, loop localization and assignment, minimum-weight cycle tours,
//! and the verification-loop splice.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};

use crate::graph::{HypothesisGraph, NodeId};
use crate::homology::{PersistenceDiagram, PersistencePair};
use crate::metric::{DistMatrix, SparseMetricGraph};

/// All vertices of the sparsified graph, keeping only edges of weight <= eps.
#[derive(Debug, Clone)]
pub struct ThresholdedGraph {
    pub eps: f64,
    pub n: usize,
    /// Sorted adjacency per vertex.
    pub adj: Vec<Vec<(NodeId, f64)>>,
}

pub fn threshold_graph(metric: &SparseMetricGraph, eps: f64) -> ThresholdedGraph {
    let mut adj = vec![Vec::new(); metric.n];
    for &(u, v, w) in &metric.edges {
        if w <= eps {
            adj[u as usize].push((v, w));
            adj[v as usize].push((u, w));
        }
    }
    for list in &mut adj {
        list.sort_by(|a, b| a.0.cmp(&b.0));
    }
    ThresholdedGraph {
        eps,
        n: metric.n,
        adj,
    }
}

impl ThresholdedGraph {
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adj[v as usize].len()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            seen[start] = true;
            queue.push_back(start as NodeId);
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &(v, _) in &self.adj[u as usize] {
                    if !seen[v as usize] {
                        seen[v as usize] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Min-cost path under edge weights with a deterministic tie rule: among all
/// minimum-cost simple paths, the lexicographically smallest vertex sequence.
///
/// Implemented as Dijkstra (for goal distances) plus a DFS over cost-tight
/// continuations in ascending neighbor order; the first completed path is
/// the lex-smallest tight path. Returns `None` when `goal` is unreachable.
pub fn shortest_path_lex(
    adj: &[Vec<(NodeId, f64)>],
    allowed: Option<&HashSet<NodeId>>,
    start: NodeId,
    goal: NodeId,
) -> Option<(Vec<NodeId>, f64)> {
    let permitted = |v: NodeId| allowed.map_or(true, |set| set.contains(&v));
    if !permitted(start) || !permitted(goal) {
        return None;
    }
    if start == goal {
        return Some((vec![start], 0.0));
    }
    let dist_goal = dijkstra(adj, &permitted, goal);
    let total = dist_goal[start as usize];
    if !total.is_finite() {
        return None;
    }
    let tol = 1e-9 * total.abs().max(1.0);

    // Iterative DFS with backtracking; neighbors ascend so the first
    // completed path is lexicographically minimal.
    let mut path: Vec<NodeId> = vec![start];
    let mut costs: Vec<f64> = vec![0.0];
    let mut cursors: Vec<usize> = vec![0];
    let mut on_path: HashSet<NodeId> = HashSet::from([start]);
    let mut guard = 0usize;
    while let Some(&u) = path.last() {
        guard += 1;
        if guard > 500_000 {
            // tie plateau blow-up; fall back to plain Dijkstra tree path
            return dijkstra_path(adj, &permitted, start, goal);
        }
        let here = *costs.last().unwrap();
        let cursor = cursors.last_mut().unwrap();
        let mut advanced = false;
        while *cursor < adj[u as usize].len() {
            let (v, w) = adj[u as usize][*cursor];
            *cursor += 1;
            if !permitted(v) || on_path.contains(&v) {
                continue;
            }
            if (here + w + dist_goal[v as usize] - total).abs() <= tol {
                if v == goal {
                    path.push(v);
                    return Some((path, total));
                }
                path.push(v);
                costs.push(here + w);
                cursors.push(0);
                on_path.insert(v);
                advanced = true;
                break;
            }
        }
        if !advanced {
            let popped = path.pop().unwrap();
            on_path.remove(&popped);
            costs.pop();
            cursors.pop();
        }
    }
    None
}

fn dijkstra(
    adj: &[Vec<(NodeId, f64)>],
    permitted: &impl Fn(NodeId) -> bool,
    source: NodeId,
) -> Vec<f64> {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[source as usize] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push((std::cmp::Reverse(ordered(0.0)), source));
    while let Some((std::cmp::Reverse(d), u)) = heap.pop() {
        let d = d.0;
        if d > dist[u as usize] {
            continue;
        }
        for &(v, w) in &adj[u as usize] {
            if !permitted(v) {
                continue;
            }
            let nd = d + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push((std::cmp::Reverse(ordered(nd)), v));
            }
        }
    }
    dist
}

#[derive(PartialEq)]
struct Ordered(f64);
impl Eq for Ordered {}
impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
fn ordered(x: f64) -> Ordered {
    Ordered(x)
}

fn dijkstra_path(
    adj: &[Vec<(NodeId, f64)>],
    permitted: &impl Fn(NodeId) -> bool,
    start: NodeId,
    goal: NodeId,
) -> Option<(Vec<NodeId>, f64)> {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<NodeId>> = vec![None; n];
    dist[start as usize] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push((std::cmp::Reverse(ordered(0.0)), start));
    while let Some((std::cmp::Reverse(d), u)) = heap.pop() {
        let d = d.0;
        if d > dist[u as usize] {
            continue;
        }
        for &(v, w) in &adj[u as usize] {
            if !permitted(v) {
                continue;
            }
            let nd = d + w;
            if nd < dist[v as usize] || (nd == dist[v as usize] && Some(u) < prev[v as usize]) {
                dist[v as usize] = nd;
                prev[v as usize] = Some(u);
                heap.push((std::cmp::Reverse(ordered(nd)), v));
            }
        }
    }
    if !dist[goal as usize].is_finite() {
        return None;
    }
    let mut path = vec![goal];
    let mut cur = goal;
    while let Some(p) = prev[cur as usize] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    Some((path, dist[goal as usize]))
}

/// A retained component of the thresholded subgraph at the cluster scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<NodeId>,
    pub start: NodeId,
    pub goal: NodeId,
    pub covered_paths: Vec<String>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Connected components of the subgraph at the cluster scale, keeping those
/// with more than 3 nodes that cover at least two reasoning paths. Anchors
/// are the min/max-progress members; ties prefer the member with smallest
/// average distance inside the cluster, then the lowest id.
pub fn extract_clusters(
    sub: &ThresholdedGraph,
    graph: &HypothesisGraph,
    dist: &DistMatrix,
) -> Vec<Cluster> {
    let mut out = Vec::new();
    for comp in sub.components() {
        if comp.len() <= 3 {
            continue;
        }
        let mut paths: BTreeSet<&str> = BTreeSet::new();
        for &v in &comp {
            for (pid, _) in &graph.nodes[v as usize].provenance {
                paths.insert(pid);
            }
        }
        if paths.len() < 2 {
            continue;
        }
        let avg_dist = |v: NodeId| -> f64 {
            let total: f64 = comp
                .iter()
                .filter(|&&u| u != v)
                .map(|&u| dist.get(v, u))
                .sum();
            total / (comp.len() - 1) as f64
        };
        let anchor = |want_min: bool| -> NodeId {
            let epsilon_free = |v: NodeId| graph.nodes[v as usize].progress;
            let best_r = comp
                .iter()
                .map(|&v| epsilon_free(v))
                .fold(if want_min { f64::INFINITY } else { f64::NEG_INFINITY }, |acc, r| {
                    if want_min {
                        acc.min(r)
                    } else {
                        acc.max(r)
                    }
                });
            let mut ties: Vec<NodeId> = comp
                .iter()
                .copied()
                .filter(|&v| epsilon_free(v) == best_r)
                .collect();
            ties.sort_by(|&a, &b| avg_dist(a).total_cmp(&avg_dist(b)).then(a.cmp(&b)));
            ties[0]
        };
        out.push(Cluster {
            start: anchor(true),
            goal: anchor(false),
            covered_paths: paths.into_iter().map(str::to_string).collect(),
            members: comp,
        });
    }
    out
}

/// Minimum-weight backbone between the cluster anchors, restricted to the
/// cluster's induced subgraph.
pub fn backbone(cluster: &Cluster, sub: &ThresholdedGraph) -> Option<(Vec<NodeId>, f64)> {
    let allowed: HashSet<NodeId> = cluster.members.iter().copied().collect();
    shortest_path_lex(&sub.adj, Some(&allowed), cluster.start, cluster.goal)
}

/// A selected H1 feature localized at its operating scale.
#[derive(Debug, Clone)]
pub struct LoopFeature {
    /// Index of the source pair in the diagram.
    pub pair_index: usize,
    pub support: Vec<NodeId>,
    pub eps: f64,
    pub birth: f64,
    pub lifespan: f64,
    pub capped_lifespan: f64,
}

/// Support vertices of a loop at scale `eps_b`: the representative cycle's
/// vertices, stitched through shortest `eps_b`-paths wherever a
/// representative edge exceeds the scale. Returns `None` when the
/// representative is missing or cannot be stitched.
pub fn localize_loop(
    pair: &PersistencePair,
    metric: &SparseMetricGraph,
    eps_b: f64,
) -> Option<Vec<NodeId>> {
    let rep = pair.representative.as_ref()?;
    if rep.is_empty() {
        return None;
    }
    let weight: HashMap<(NodeId, NodeId), f64> = metric
        .edges
        .iter()
        .map(|&(u, v, w)| ((u, v), w))
        .collect();
    let sub = threshold_graph(metric, eps_b);
    let mut verts: BTreeSet<NodeId> = BTreeSet::new();
    for &(u, v) in rep {
        verts.insert(u);
        verts.insert(v);
        let w = weight
            .get(&(u.min(v), u.max(v)))
            .copied()
            .unwrap_or(f64::INFINITY);
        if w > eps_b {
            let (path, _) = shortest_path_lex(&sub.adj, None, u, v)?;
            verts.extend(path);
        }
    }
    Some(verts.into_iter().collect())
}

/// Builds localized loop features for the selected H1 indices. Loops whose
/// representative cannot be localized are dropped with a warning string.
pub fn localize_selected_loops(
    dgm: &PersistenceDiagram,
    selected: &[(usize, f64)],
    metric: &SparseMetricGraph,
    warnings: &mut Vec<String>,
) -> Vec<LoopFeature> {
    let mut out = Vec::new();
    for &(idx, eps) in selected {
        let pair = &dgm.pairs[idx];
        match localize_loop(pair, metric, eps) {
            Some(support) => out.push(LoopFeature {
                pair_index: idx,
                support,
                eps,
                birth: pair.birth,
                lifespan: pair.lifespan(),
                capped_lifespan: pair.capped_lifespan(dgm.tau_value),
            }),
            None => warnings.push(format!(
                "loop at diagram index {idx} skipped: representative missing or unstitchable"
            )),
        }
    }
    out
}

/// Assigns each loop to the cluster with maximal support overlap (ties:
/// larger cluster, then lower cluster index) and picks each cluster's
/// principal loop by lifespan (ties: earlier birth, then lower loop index).
/// Returns (per-loop cluster assignment, per-cluster principal loop).
pub fn assign_loops(
    loops: &[LoopFeature],
    clusters: &[Cluster],
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let member_sets: Vec<HashSet<NodeId>> = clusters
        .iter()
        .map(|c| c.members.iter().copied().collect())
        .collect();
    let mut assignment: Vec<Option<usize>> = Vec::with_capacity(loops.len());
    for lf in loops {
        let mut best: Option<(usize, usize)> = None; // (cluster idx, overlap)
        for (ci, set) in member_sets.iter().enumerate() {
            let overlap = lf.support.iter().filter(|v| set.contains(v)).count();
            if overlap == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bo)) => {
                    overlap > bo
                        || (overlap == bo && clusters[ci].size() > clusters[bi].size())
                }
            };
            if better {
                best = Some((ci, overlap));
            }
        }
        assignment.push(best.map(|(ci, _)| ci));
    }
    let mut principal: Vec<Option<usize>> = vec![None; clusters.len()];
    for (li, lf) in loops.iter().enumerate() {
        if let Some(ci) = assignment[li] {
            let better = match principal[ci] {
                None => true,
                Some(pi) => {
                    let cur = &loops[pi];
                    lf.lifespan > cur.lifespan
                        || (lf.lifespan == cur.lifespan && lf.birth < cur.birth)
                }
            };
            if better {
                principal[ci] = Some(li);
            }
        }
    }
    (assignment, principal)
}

/// A closed tour through the loop support at its operating scale.
///
/// Horton candidate cycles (per vertex v and edge (x,y): SP(v,x) + (x,y) +
/// SP(y,v)) are ranked by representative coverage, then total weight, then a
/// canonical edge-list order. When the induced subgraph is acyclic the tour
/// is stitched instead: representative vertices in progress order, closed
/// through shortest paths (edges may repeat).
pub fn cycle_tour(
    support: &[NodeId],
    sub_b: &ThresholdedGraph,
    rep_vertices: &[NodeId],
    progress: &[f64],
) -> Option<Vec<NodeId>> {
    let allowed: HashSet<NodeId> = support.iter().copied().collect();
    let mut edges: Vec<(NodeId, NodeId, f64)> = Vec::new();
    for &u in support {
        for &(v, w) in &sub_b.adj[u as usize] {
            if u < v && allowed.contains(&v) {
                edges.push((u, v, w));
            }
        }
    }
    let rep_set: HashSet<NodeId> = rep_vertices.iter().copied().collect();

    let mut seen: HashSet<Vec<(NodeId, NodeId)>> = HashSet::new();
    let mut best: Option<(usize, f64, Vec<(NodeId, NodeId)>)> = None;
    for &v in support {
        for &(x, y, w_xy) in &edges {
            let sp_vx = shortest_path_lex(&sub_b.adj, Some(&allowed), v, x);
            let sp_yv = shortest_path_lex(&sub_b.adj, Some(&allowed), y, v);
            let (Some((path_vx, _)), Some((path_yv, _))) = (sp_vx, sp_yv) else {
                continue;
            };
            let mut edge_set: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
            let mut xor_edge = |a: NodeId, b: NodeId| {
                let key = (a.min(b), a.max(b));
                if !edge_set.remove(&key) {
                    edge_set.insert(key);
                }
            };
            for pair in path_vx.windows(2) {
                xor_edge(pair[0], pair[1]);
            }
            xor_edge(x, y);
            for pair in path_yv.windows(2) {
                xor_edge(pair[0], pair[1]);
            }
            let canon: Vec<(NodeId, NodeId)> = edge_set.iter().copied().collect();
            if canon.len() < 3 || !is_simple_cycle(&canon) || !seen.insert(canon.clone()) {
                continue;
            }
            let _ = w_xy;
            let weight: f64 = canon
                .iter()
                .map(|&(a, b)| edge_weight(sub_b, a, b))
                .sum();
            let coverage = cycle_vertices(&canon)
                .iter()
                .filter(|v| rep_set.contains(v))
                .count();
            let better = match &best {
                None => true,
                Some((bc, bw, bcanon)) => {
                    coverage > *bc
                        || (coverage == *bc && weight < *bw - 1e-12)
                        || (coverage == *bc && (weight - *bw).abs() <= 1e-12 && canon < *bcanon)
                }
            };
            if better {
                best = Some((coverage, weight, canon));
            }
        }
    }

    if let Some((_, _, canon)) = best {
        return Some(edge_cycle_to_vertex_tour(&canon));
    }

    // Acyclic at this scale: stitch representative vertices in progress
    // order and close the walk through shortest paths.
    let mut order: Vec<NodeId> = rep_vertices
        .iter()
        .copied()
        .filter(|v| allowed.contains(v))
        .collect();
    if order.len() < 2 {
        return None;
    }
    order.sort_by(|&a, &b| {
        progress[a as usize]
            .total_cmp(&progress[b as usize])
            .then(a.cmp(&b))
    });
    let mut walk: Vec<NodeId> = Vec::new();
    for i in 0..order.len() {
        let from = order[i];
        let to = order[(i + 1) % order.len()];
        let (leg, _) = shortest_path_lex(&sub_b.adj, Some(&allowed), from, to)?;
        walk.extend(&leg[..leg.len() - 1]);
    }
    if walk.len() < 2 {
        return None;
    }
    Some(walk)
}

fn edge_weight(sub: &ThresholdedGraph, a: NodeId, b: NodeId) -> f64 {
    sub.adj[a as usize]
        .iter()
        .find(|&&(v, _)| v == b)
        .map(|&(_, w)| w)
        .unwrap_or(f64::INFINITY)
}

fn cycle_vertices(edges: &[(NodeId, NodeId)]) -> Vec<NodeId> {
    let mut verts: Vec<NodeId> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    verts.sort_unstable();
    verts.dedup();
    verts
}

fn is_simple_cycle(edges: &[(NodeId, NodeId)]) -> bool {
    let mut deg: HashMap<NodeId, usize> = HashMap::new();
    for &(a, b) in edges {
        *deg.entry(a).or_default() += 1;
        *deg.entry(b).or_default() += 1;
    }
    if !deg.values().all(|&d| d == 2) {
        return false;
    }
    // connectivity: walk from the smallest vertex
    let verts = cycle_vertices(edges);
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen: HashSet<NodeId> = HashSet::new();
    let mut stack = vec![verts[0]];
    while let Some(u) = stack.pop() {
        if !seen.insert(u) {
            continue;
        }
        for &v in &adj[&u] {
            stack.push(v);
        }
    }
    seen.len() == verts.len()
}

/// Converts a simple cycle's edge set into a vertex tour starting at the
/// smallest vertex, stepping first toward its smaller neighbor.
fn edge_cycle_to_vertex_tour(edges: &[(NodeId, NodeId)]) -> Vec<NodeId> {
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    for list in adj.values_mut() {
        list.sort_unstable();
    }
    let start = *adj.keys().min().unwrap();
    let mut tour = vec![start];
    let mut prev = start;
    let mut cur = adj[&start][0];
    while cur != start {
        tour.push(cur);
        let next = adj[&cur]
            .iter()
            .copied()
            .find(|&v| v != prev)
            .expect("degree-2 vertex has a continuation");
        prev = cur;
        cur = next;
    }
    tour
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpliceParams {
    pub delta_loop: f64,
    pub lambda: f64,
}

impl Default for SpliceParams {
    fn default() -> Self {
        SpliceParams {
            delta_loop: 0.15,
            lambda: 0.15,
        }
    }
}

impl SpliceParams {
    /// The fixed default and the adaptive scale combine conservatively.
    pub fn effective_delta(&self, eps_b: f64) -> f64 {
        self.delta_loop.min(self.lambda * eps_b)
    }
}

/// One cluster's extracted reasoning skeleton plus reporting statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub cluster_index: usize,
    pub path: Vec<NodeId>,
    pub spliced: bool,
    pub pivot: Option<NodeId>,
    pub tour: Vec<NodeId>,
    pub backbone_cost: f64,
    pub cluster_size: usize,
    pub has_principal_loop: bool,
    /// Raw lifespan of the principal loop (may be infinite).
    pub loop_lifespan: Option<f64>,
    /// Lifespan with infinite deaths truncated at the observation horizon.
    pub loop_lifespan_capped: Option<f64>,
    pub covered_paths: Vec<String>,
    pub avg_edge_weight: f64,
}

fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Builds the skeleton for one cluster: the backbone, rerouted through the
/// principal loop's tour when the loop passes the splice condition.
#[allow(clippy::too_many_arguments)]
pub fn build_skeleton(
    cluster: &Cluster,
    cluster_index: usize,
    sub_h0: &ThresholdedGraph,
    principal: Option<&LoopFeature>,
    tour: Option<&[NodeId]>,
    dist: &DistMatrix,
    progress: &[f64],
    params: &SpliceParams,
) -> Option<Skeleton> {
    let (backbone_path, backbone_cost) = backbone(cluster, sub_h0)?;
    let mut skeleton = Skeleton {
        cluster_index,
        path: backbone_path.clone(),
        spliced: false,
        pivot: None,
        tour: Vec::new(),
        backbone_cost,
        cluster_size: cluster.size(),
        has_principal_loop: principal.is_some(),
        loop_lifespan: principal.map(|l| l.lifespan),
        loop_lifespan_capped: principal.map(|l| l.capped_lifespan),
        covered_paths: cluster.covered_paths.clone(),
        avg_edge_weight: 0.0,
    };

    if let (Some(lf), Some(tour)) = (principal, tour) {
        let delta = params.effective_delta(lf.eps);
        let min_cross = tour
            .iter()
            .flat_map(|&t| backbone_path.iter().map(move |&b| dist.get(t, b)))
            .fold(f64::INFINITY, f64::min);
        if min_cross < delta {
            let mut sorted_r: Vec<f64> = cluster
                .members
                .iter()
                .map(|&v| progress[v as usize])
                .collect();
            sorted_r.sort_by(f64::total_cmp);
            let median_r = lower_median(&sorted_r);
            let pivot = lf
                .support
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    (progress[a as usize] - median_r)
                        .abs()
                        .total_cmp(&(progress[b as usize] - median_r).abs())
                        .then(a.cmp(&b))
                })
                .expect("loop support is non-empty");
            if let Some(path) =
                splice(&backbone_path, tour, pivot, cluster, sub_h0, dist)
            {
                skeleton.path = path;
                skeleton.spliced = true;
                skeleton.pivot = Some(pivot);
                skeleton.tour = tour.to_vec();
            }
        }
    }

    let pairs = skeleton.path.windows(2).count();
    if pairs > 0 {
        skeleton.avg_edge_weight = skeleton
            .path
            .windows(2)
            .map(|w| dist.get(w[0], w[1]))
            .sum::<f64>()
            / pairs as f64;
    }
    Some(skeleton)
}

/// Reroutes the backbone as start -> pivot -> tour -> pivot -> goal in the
/// union of the cluster-scale subgraph and the tour edges, collapsing
/// consecutive duplicates. Returns `None` when a leg is unreachable.
fn splice(
    backbone_path: &[NodeId],
    tour: &[NodeId],
    pivot: NodeId,
    cluster: &Cluster,
    sub_h0: &ThresholdedGraph,
    dist: &DistMatrix,
) -> Option<Vec<NodeId>> {
    // union adjacency: cluster-scale edges plus tour edges
    let mut adj = sub_h0.adj.clone();
    let add_edge = |adj: &mut Vec<Vec<(NodeId, f64)>>, a: NodeId, b: NodeId| {
        if a == b {
            return;
        }
        if !adj[a as usize].iter().any(|&(v, _)| v == b) {
            adj[a as usize].push((b, dist.get(a, b)));
            adj[a as usize].sort_by(|x, y| x.0.cmp(&y.0));
        }
        if !adj[b as usize].iter().any(|&(v, _)| v == a) {
            adj[b as usize].push((a, dist.get(a, b)));
            adj[b as usize].sort_by(|x, y| x.0.cmp(&y.0));
        }
    };
    for i in 0..tour.len() {
        add_edge(&mut adj, tour[i], tour[(i + 1) % tour.len()]);
    }

    let start = backbone_path[0];
    let goal = *backbone_path.last().unwrap();
    let (to_pivot, _) = shortest_path_lex(&adj, None, start, pivot)?;
    let (from_pivot, _) = shortest_path_lex(&adj, None, pivot, goal)?;

    // orient the tour from the pivot (or its nearest tour vertex), first
    // step toward the lower node id
    let anchor = if tour.contains(&pivot) {
        pivot
    } else {
        *tour
            .iter()
            .min_by(|&&a, &&b| {
                dist.get(a, pivot)
                    .total_cmp(&dist.get(b, pivot))
                    .then(a.cmp(&b))
            })
            .expect("tour is non-empty")
    };
    let pos = tour.iter().position(|&v| v == anchor).unwrap();
    let forward: Vec<NodeId> = (0..=tour.len())
        .map(|i| tour[(pos + i) % tour.len()])
        .collect();
    let backward: Vec<NodeId> = (0..=tour.len())
        .map(|i| tour[(pos + tour.len() - i % tour.len()) % tour.len()])
        .collect();
    let loop_walk = if forward[1] <= backward[1] { forward } else { backward };

    let mut full: Vec<NodeId> = Vec::new();
    full.extend(&to_pivot);
    if anchor != pivot {
        let (bridge, _) = shortest_path_lex(&adj, None, pivot, anchor)?;
        full.extend(&bridge[1..]);
        full.extend(&loop_walk[1..]);
        let (back, _) = shortest_path_lex(&adj, None, anchor, pivot)?;
        full.extend(&back[1..]);
    } else {
        full.extend(&loop_walk[1..]);
    }
    full.extend(&from_pivot[1..]);

    let mut collapsed: Vec<NodeId> = Vec::with_capacity(full.len());
    for v in full {
        if collapsed.last() != Some(&v) {
            collapsed.push(v);
        }
    }
    let _ = cluster;
    Some(collapsed)
}

/// Orders clusters for reporting and voting priority: principal loops first,
/// then larger loop lifespan, larger cluster, smaller backbone cost, and
/// finally cluster index.
pub fn rank_clusters(skeletons: &[Skeleton]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..skeletons.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = &skeletons[a];
        let sb = &skeletons[b];
        sb.has_principal_loop
            .cmp(&sa.has_principal_loop)
            .then_with(|| {
                let la = sa.loop_lifespan.unwrap_or(f64::NEG_INFINITY);
                let lb = sb.loop_lifespan.unwrap_or(f64::NEG_INFINITY);
                lb.total_cmp(&la)
            })
            .then(sb.cluster_size.cmp(&sa.cluster_size))
            .then(sa.backbone_cost.total_cmp(&sb.backbone_cost))
            .then(sa.cluster_index.cmp(&sb.cluster_index))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeKind, HypothesisEdge, HypothesisNode};

    fn sparse(n: usize, edges: &[(NodeId, NodeId, f64)]) -> SparseMetricGraph {
        SparseMetricGraph {
            n,
            edges: edges.to_vec(),
            tau_value: edges.iter().map(|e| e.2).fold(0.0, f64::max),
        }
    }

    fn dist_from(n: usize, edges: &[(NodeId, NodeId, f64)], default: f64) -> DistMatrix {
        let mut data = vec![default; n * n];
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        for &(u, v, w) in edges {
            data[u as usize * n + v as usize] = w;
            data[v as usize * n + u as usize] = w;
        }
        DistMatrix::new(n, data)
    }

    fn graph_with(progresses: &[f64], provenance_paths: &[&str]) -> HypothesisGraph {
        let nodes = progresses
            .iter()
            .enumerate()
            .map(|(i, &r)| HypothesisNode {
                node_id: i as NodeId,
                text: format!("t{i}"),
                canon: format!("t{i}"),
                confidence: 0.5,
                progress: r,
                provenance: vec![(provenance_paths[i].to_string(), i + 1)],
                answer: None,
            })
            .collect();
        HypothesisGraph {
            instance_id: "t".into(),
            nodes,
            edges: vec![HypothesisEdge {
                src: 0,
                dst: 1,
                kind: EdgeKind::Adjacency,
            }],
        }
    }

    #[test]
    fn threshold_examples() {
        let m = sparse(3, &[(0, 1, 0.5), (1, 2, 1.0), (0, 2, 1.5)]);
        assert_eq!(threshold_graph(&m, 0.4).edge_count(), 0);
        assert_eq!(threshold_graph(&m, 1.5).edge_count(), 3);
        assert_eq!(threshold_graph(&m, 1.0).edge_count(), 2); // inclusive
    }

    #[test]
    fn cluster_filters() {
        // 4-node component, single path -> rejected
        let m = sparse(4, &[(0, 1, 0.1), (1, 2, 0.1), (2, 3, 0.1)]);
        let sub = threshold_graph(&m, 1.0);
        let g = graph_with(&[0.1, 0.2, 0.3, 0.4], &["p0", "p0", "p0", "p0"]);
        let d = dist_from(4, &[], 1.0);
        assert!(extract_clusters(&sub, &g, &d).is_empty());

        // 3-node two-path component -> rejected on size
        let m3 = sparse(3, &[(0, 1, 0.1), (1, 2, 0.1)]);
        let sub3 = threshold_graph(&m3, 1.0);
        let g3 = graph_with(&[0.1, 0.2, 0.3], &["p0", "p1", "p0"]);
        let d3 = dist_from(3, &[], 1.0);
        assert!(extract_clusters(&sub3, &g3, &d3).is_empty());

        // 5-node two-path component -> kept, anchors by progress
        let m5 = sparse(5, &[(0, 1, 0.1), (1, 2, 0.1), (2, 3, 0.1), (3, 4, 0.1)]);
        let sub5 = threshold_graph(&m5, 1.0);
        let g5 = graph_with(&[0.1, 0.3, 0.5, 0.7, 0.9], &["p0", "p0", "p1", "p1", "p0"]);
        let d5 = dist_from(5, &[], 1.0);
        let clusters = extract_clusters(&sub5, &g5, &d5);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].start, 0);
        assert_eq!(clusters[0].goal, 4);
        assert_eq!(clusters[0].covered_paths, vec!["p0", "p1"]);
    }

    #[test]
    fn backbone_chain_and_detour() {
        let m = sparse(3, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let sub = threshold_graph(&m, 2.0);
        let cluster = Cluster {
            members: vec![0, 1, 2],
            start: 0,
            goal: 2,
            covered_paths: vec!["p0".into(), "p1".into()],
        };
        let (path, cost) = backbone(&cluster, &sub).unwrap();
        assert_eq!(path, vec![0, 1, 2]);
        assert!((cost - 2.0).abs() < 1e-12);

        // direct edge cost 5 vs two-hop cost 3
        let m2 = sparse(3, &[(0, 2, 5.0), (0, 1, 1.5), (1, 2, 1.5)]);
        let sub2 = threshold_graph(&m2, 5.0);
        let (path2, cost2) = backbone(&cluster, &sub2).unwrap();
        assert_eq!(path2, vec![0, 1, 2]);
        assert!((cost2 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn backbone_square_lexicographic_tie() {
        // square 0-1-2-3-0, unit weights; 0 -> 2 has two cost-2 paths
        let m = sparse(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)]);
        let sub = threshold_graph(&m, 1.0);
        let cluster = Cluster {
            members: vec![0, 1, 2, 3],
            start: 0,
            goal: 2,
            covered_paths: vec![],
        };
        let (path, cost) = backbone(&cluster, &sub).unwrap();
        assert_eq!(path, vec![0, 1, 2]); // [0,1,2] < [0,3,2]
        assert!((cost - 2.0).abs() < 1e-12);
    }

    #[test]
    fn anchors_equal_gives_single_node_backbone() {
        let m = sparse(2, &[(0, 1, 0.5)]);
        let sub = threshold_graph(&m, 1.0);
        let cluster = Cluster {
            members: vec![0, 1],
            start: 0,
            goal: 0,
            covered_paths: vec![],
        };
        let (path, cost) = backbone(&cluster, &sub).unwrap();
        assert_eq!(path, vec![0]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn localize_square_representative() {
        let s2 = 2.0f64.sqrt();
        let m = sparse(
            4,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (0, 3, 1.0),
                (0, 2, s2),
                (1, 3, s2),
            ],
        );
        let f = crate::homology::build_filtration(&m);
        let dgm = crate::homology::compute_persistence(&f, s2);
        let pair = dgm
            .pairs_in_dim(1)
            .find(|p| p.lifespan() > 0.0)
            .unwrap();
        let support = localize_loop(pair, &m, 0.99 * s2).unwrap();
        assert_eq!(support, vec![0, 1, 2, 3]);
    }

    #[test]
    fn localize_stitches_fragmented_representative() {
        // representative edge (0,2) has weight 1.2 > eps_b = 1.05; the
        // stitching path 0-4-2 (weights 0.5 each) must be pulled in
        let m = sparse(
            5,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.2),
                (0, 4, 0.5),
                (2, 4, 0.5),
            ],
        );
        let pair = PersistencePair {
            dimension: 1,
            birth: 1.2,
            death: None,
            representative: Some(vec![(0, 1), (1, 2), (0, 2)]),
        };
        let support = localize_loop(&pair, &m, 1.05).unwrap();
        assert_eq!(support, vec![0, 1, 2, 4]);
    }

    #[test]
    fn loop_assignment_rules() {
        let clusters = vec![
            Cluster {
                members: vec![0, 1, 2, 3],
                start: 0,
                goal: 3,
                covered_paths: vec![],
            },
            Cluster {
                members: vec![4, 5, 6, 7],
                start: 4,
                goal: 7,
                covered_paths: vec![],
            },
        ];
        let mk = |support: Vec<NodeId>, lifespan: f64, birth: f64| LoopFeature {
            pair_index: 0,
            support,
            eps: 1.0,
            birth,
            lifespan,
            capped_lifespan: lifespan,
        };
        let loops = vec![
            mk(vec![0, 1, 2], 0.4, 0.0),        // fully in cluster 0
            mk(vec![0, 1, 2, 4], 0.2, 0.0),     // overlap {3,1} -> cluster 0
            mk(vec![8, 9], 0.9, 0.0),           // zero overlap -> unassigned
        ];
        let (assign, principal) = assign_loops(&loops, &clusters);
        assert_eq!(assign, vec![Some(0), Some(0), None]);
        assert_eq!(principal[0], Some(0)); // lifespan 0.4 beats 0.2
        assert_eq!(principal[1], None);
    }

    #[test]
    fn tour_of_plain_square() {
        let m = sparse(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)]);
        let sub = threshold_graph(&m, 1.0);
        let tour = cycle_tour(&[0, 1, 2, 3], &sub, &[0, 1, 2, 3], &[0.0, 0.3, 0.6, 0.9]).unwrap();
        assert_eq!(tour, vec![0, 1, 2, 3]);
    }

    #[test]
    fn tour_of_triangle() {
        let m = sparse(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        let sub = threshold_graph(&m, 1.0);
        let tour = cycle_tour(&[0, 1, 2], &sub, &[0, 1, 2], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(tour.len(), 3);
        let weight: f64 = (0..3)
            .map(|i| edge_weight(&sub, tour[i], tour[(i + 1) % 3]))
            .sum();
        assert!((weight - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tour_prefers_representative_coverage_over_weight() {
        // square with one chord: triangles 0-1-2 and 0-2-3 have weight 3,
        // the square has weight 4 but covers all four representative verts
        let m = sparse(
            4,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (0, 3, 1.0),
                (0, 2, 1.0),
            ],
        );
        let sub = threshold_graph(&m, 1.0);
        let tour = cycle_tour(&[0, 1, 2, 3], &sub, &[0, 1, 2, 3], &[0.0, 0.3, 0.6, 0.9]).unwrap();
        assert_eq!(cycle_len(&tour), 4);

        // with representative = a triangle, the cheaper triangle wins
        let tour2 = cycle_tour(&[0, 1, 2, 3], &sub, &[0, 1, 2], &[0.0, 0.3, 0.6, 0.9]).unwrap();
        assert_eq!(cycle_len(&tour2), 3);
    }

    fn cycle_len(tour: &[NodeId]) -> usize {
        tour.len()
    }

    #[test]
    fn effective_delta_is_conservative_min() {
        let p = SpliceParams::default();
        assert!((p.effective_delta(0.8) - 0.12).abs() < 1e-12);
        assert!((p.effective_delta(2.0) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn ranking_keys() {
        let mk = |has_loop: bool, lifespan: Option<f64>, size: usize, cost: f64, idx: usize| {
            Skeleton {
                cluster_index: idx,
                path: vec![],
                spliced: false,
                pivot: None,
                tour: vec![],
                backbone_cost: cost,
                cluster_size: size,
                has_principal_loop: has_loop,
                loop_lifespan: lifespan,
                loop_lifespan_capped: lifespan,
                covered_paths: vec![],
                avg_edge_weight: 0.0,
            }
        };
        let sk = vec![
            mk(false, None, 10, 1.0, 0),
            mk(true, Some(0.3), 4, 2.0, 1),
            mk(true, Some(0.5), 4, 9.0, 2),
            mk(true, Some(0.5), 4, 3.5, 3),
        ];
        let order = rank_clusters(&sk);
        assert_eq!(order, vec![3, 2, 1, 0]);
    }

    #[test]
    fn splice_decision_monotone_in_delta() {
        // chain 0-1-2-3 plus a disjoint triangle {4,5,6}; the bridge edge
        // (1,4) makes the tour reachable at cross distance 0.05
        let edges = &[
            (0, 1, 0.1),
            (1, 2, 0.1),
            (2, 3, 0.1),
            (1, 4, 0.05),
            (4, 5, 0.1),
            (5, 6, 0.1),
            (4, 6, 0.1),
        ];
        let m = sparse(7, edges);
        let sub = threshold_graph(&m, 1.0);
        let dist = dist_from(7, edges, 0.5);
        let cluster = Cluster {
            members: vec![0, 1, 2, 3, 4, 5, 6],
            start: 0,
            goal: 3,
            covered_paths: vec!["a".into(), "b".into()],
        };
        let lf = LoopFeature {
            pair_index: 0,
            support: vec![4, 5, 6],
            eps: 1.0,
            birth: 0.1,
            lifespan: 0.4,
            capped_lifespan: 0.4,
        };
        let progress = [0.0, 0.2, 0.8, 1.0, 0.4, 0.5, 0.6];
        let run = |delta: f64| {
            build_skeleton(
                &cluster,
                0,
                &sub,
                Some(&lf),
                Some(&[4, 5, 6][..]),
                &dist,
                &progress,
                &SpliceParams {
                    delta_loop: delta,
                    lambda: 1.0,
                },
            )
            .unwrap()
        };
        // min cross distance is d(1,4) = 0.05
        let tight = run(0.01);
        assert!(!tight.spliced);
        assert_eq!(tight.path, vec![0, 1, 2, 3]);
        let loose = run(0.2);
        assert!(loose.spliced);
        assert_eq!(*loose.path.first().unwrap(), 0);
        assert_eq!(*loose.path.last().unwrap(), 3);
        for v in [4u32, 5, 6] {
            assert!(loose.path.contains(&v), "missing tour vertex {v}");
        }
        // pivot is the support vertex nearest the cluster's median progress
        assert_eq!(loose.pivot, Some(5));
    }
}
