//! Vietoris–Rips persistence on the sparsified metric graph.
//!
//! The filtration is the clique complex up to dimension 2: vertices enter at
//! 0, retained edges at their weight, and triangles (3-cliques of retained
//! edges) at the max of their three edge weights. Persistence is computed by
//! the standard boundary-matrix column reduction over GF(2) in filtration
//! order; H0 can be cross-checked against a union-find sweep.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::graph::NodeId;
use crate::metric::SparseMetricGraph;

/// A simplex with its filtration value. `verts` is sorted ascending;
/// dimension is `verts.len() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    pub verts: Vec<NodeId>,
    pub value: f64,
}

impl Simplex {
    pub fn dimension(&self) -> usize {
        self.verts.len() - 1
    }
}

/// Simplices in a total order compatible with the filtration: by value,
/// then dimension, then lexicographic vertex tuple.
#[derive(Debug, Clone)]
pub struct Filtration {
    pub simplices: Vec<Simplex>,
}

pub fn build_filtration(g: &SparseMetricGraph) -> Filtration {
    let mut simplices: Vec<Simplex> = Vec::with_capacity(g.n + g.edges.len());
    for v in 0..g.n {
        simplices.push(Simplex {
            verts: vec![v as NodeId],
            value: 0.0,
        });
    }
    let mut weight: HashMap<(NodeId, NodeId), f64> = HashMap::new();
    let mut neighbors: Vec<Vec<NodeId>> = vec![Vec::new(); g.n];
    for &(u, v, w) in &g.edges {
        simplices.push(Simplex {
            verts: vec![u, v],
            value: w,
        });
        weight.insert((u, v), w);
        neighbors[u as usize].push(v);
        neighbors[v as usize].push(u);
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    // 3-cliques: for each edge (u,v) with u<v, common neighbors w>v avoid
    // emitting the same triangle three times.
    for &(u, v, _) in &g.edges {
        let nu = &neighbors[u as usize];
        let nv = &neighbors[v as usize];
        let (mut i, mut j) = (0, 0);
        while i < nu.len() && j < nv.len() {
            match nu[i].cmp(&nv[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let w = nu[i];
                    if w > v {
                        let val = weight[&(u, v)]
                            .max(weight[&(u.min(w), u.max(w))])
                            .max(weight[&(v.min(w), v.max(w))]);
                        simplices.push(Simplex {
                            verts: vec![u, v, w],
                            value: val,
                        });
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    simplices.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.verts.len().cmp(&b.verts.len()))
            .then(a.verts.cmp(&b.verts))
    });
    Filtration { simplices }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub dimension: u8,
    pub birth: f64,
    /// `None` encodes an infinite death.
    pub death: Option<f64>,
    /// For dimension 1: the edges of a cycle alive at birth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub representative: Option<Vec<(NodeId, NodeId)>>,
}

impl PersistencePair {
    pub fn lifespan(&self) -> f64 {
        match self.death {
            Some(d) => d - self.birth,
            None => f64::INFINITY,
        }
    }

    /// Lifespan with infinite deaths truncated at the observation horizon
    /// (the truncation scale), for uses that need a finite number.
    pub fn capped_lifespan(&self, horizon: f64) -> f64 {
        match self.death {
            Some(d) => d - self.birth,
            None => (horizon - self.birth).max(0.0),
        }
    }

    pub fn representative_vertices(&self) -> Vec<NodeId> {
        let mut verts: Vec<NodeId> = self
            .representative
            .iter()
            .flatten()
            .flat_map(|&(u, v)| [u, v])
            .collect();
        verts.sort_unstable();
        verts.dedup();
        verts
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub pairs: Vec<PersistencePair>,
    pub tau_value: f64,
    pub params_hash: String,
}

impl PersistenceDiagram {
    pub fn pairs_in_dim(&self, dim: u8) -> impl Iterator<Item = &PersistencePair> {
        self.pairs.iter().filter(move |p| p.dimension == dim)
    }
}

/// Boundary-matrix column reduction over GF(2), in filtration order.
///
/// Zero-lifespan pairs are retained. Every H1 pair carries a representative:
/// for finite pairs the reduced killer column (a cycle alive at birth), for
/// essential classes the accumulated creator chain.
pub fn compute_persistence(filtration: &Filtration, tau_value: f64) -> PersistenceDiagram {
    let simplices = &filtration.simplices;
    let m = simplices.len();
    let mut index_of: HashMap<&[NodeId], usize> = HashMap::with_capacity(m);
    for (i, s) in simplices.iter().enumerate() {
        index_of.insert(s.verts.as_slice(), i);
    }

    // Reduced boundary columns, ascending simplex indices; low = max entry.
    let mut reduced: Vec<Vec<usize>> = Vec::with_capacity(m);
    // For edge columns that reduce to zero: which original edge columns were
    // accumulated (the created cycle).
    let mut chains: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut pivot_owner: HashMap<usize, usize> = HashMap::new();
    let mut killed_by: Vec<Option<usize>> = vec![None; m];
    let mut is_creator: Vec<bool> = vec![false; m];

    for (j, s) in simplices.iter().enumerate() {
        let mut col: Vec<usize> = match s.verts.len() {
            1 => Vec::new(),
            len => {
                let mut facets = Vec::with_capacity(len);
                for skip in 0..len {
                    let face: Vec<NodeId> = s
                        .verts
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != skip)
                        .map(|(_, &v)| v)
                        .collect();
                    facets.push(index_of[face.as_slice()]);
                }
                facets.sort_unstable();
                facets
            }
        };
        if s.dimension() == 1 {
            chains[j].push(j);
        }
        while let Some(&low) = col.last() {
            match pivot_owner.get(&low) {
                None => break,
                Some(&owner) => {
                    col = xor_sorted(&col, &reduced[owner]);
                    if s.dimension() == 1 {
                        chains[j] = xor_sorted(&chains[j], &chains[owner]);
                    }
                }
            }
        }
        if let Some(&low) = col.last() {
            pivot_owner.insert(low, j);
            killed_by[low] = Some(j);
        } else {
            is_creator[j] = true;
        }
        reduced.push(col);
    }

    let edge_pair = |idx: usize| -> (NodeId, NodeId) {
        let v = &simplices[idx].verts;
        (v[0], v[1])
    };

    let mut pairs: Vec<PersistencePair> = Vec::new();
    for (i, s) in simplices.iter().enumerate() {
        if !is_creator[i] {
            continue;
        }
        let dim = s.dimension() as u8;
        if dim > 1 {
            continue; // triangles create nothing we track (no H2)
        }
        match killed_by[i] {
            Some(killer) => {
                let representative = if dim == 1 {
                    Some(reduced[killer].iter().map(|&e| edge_pair(e)).collect())
                } else {
                    None
                };
                pairs.push(PersistencePair {
                    dimension: dim,
                    birth: s.value,
                    death: Some(simplices[killer].value),
                    representative,
                });
            }
            None => {
                let representative = if dim == 1 {
                    Some(chains[i].iter().map(|&e| edge_pair(e)).collect())
                } else {
                    None
                };
                pairs.push(PersistencePair {
                    dimension: dim,
                    birth: s.value,
                    death: None,
                    representative,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.dimension
            .cmp(&b.dimension)
            .then(a.birth.total_cmp(&b.birth))
            .then(match (a.death, b.death) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            })
    });
    PersistenceDiagram {
        pairs,
        tau_value,
        params_hash: String::new(),
    }
}

fn xor_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// H0 (birth, death) multiset via a union-find sweep over edges in
/// filtration order; must agree with the matrix reduction.
pub fn h0_via_union_find(filtration: &Filtration) -> Vec<(f64, Option<f64>)> {
    let verts: Vec<&Simplex> = filtration
        .simplices
        .iter()
        .filter(|s| s.dimension() == 0)
        .collect();
    let n = verts.len();
    let mut id_to_idx = HashMap::new();
    for (i, s) in verts.iter().enumerate() {
        id_to_idx.insert(s.verts[0], i);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut deaths: Vec<(f64, Option<f64>)> = Vec::with_capacity(n);
    for s in &filtration.simplices {
        if s.dimension() != 1 {
            continue;
        }
        let a = find(&mut parent, id_to_idx[&s.verts[0]]);
        let b = find(&mut parent, id_to_idx[&s.verts[1]]);
        if a != b {
            parent[a.max(b)] = a.min(b);
            deaths.push((0.0, Some(s.value)));
        }
    }
    let components = (0..n).filter(|&i| find(&mut parent, i) == i).count();
    for _ in 0..components {
        deaths.push((0.0, None));
    }
    deaths
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    TopK,
    TopQPercent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub k: usize,
    /// Percent, only read in `TopQPercent` mode.
    pub q: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            mode: SelectionMode::TopK,
            k: 5,
            q: 20.0,
        }
    }
}

/// Selects significant features per dimension by lifespan: infinite
/// lifespans first, then descending lifespan, ties by earlier birth then by
/// representative. Zero-lifespan pairs are never selected. Returns indices
/// into `dgm.pairs`.
pub fn select_features(
    dgm: &PersistenceDiagram,
    policy: &SelectionPolicy,
) -> (Vec<usize>, Vec<usize>) {
    let pick = |dim: u8| -> Vec<usize> {
        let mut eligible: Vec<usize> = dgm
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.dimension == dim && p.lifespan() > 0.0)
            .map(|(i, _)| i)
            .collect();
        eligible.sort_by(|&a, &b| {
            let pa = &dgm.pairs[a];
            let pb = &dgm.pairs[b];
            pb.death
                .is_none()
                .cmp(&pa.death.is_none())
                .then(pb.lifespan().total_cmp(&pa.lifespan()))
                .then(pa.birth.total_cmp(&pb.birth))
                .then(pa.representative.cmp(&pb.representative))
        });
        let count = match policy.mode {
            SelectionMode::TopK => policy.k,
            SelectionMode::TopQPercent => {
                ((policy.q / 100.0) * eligible.len() as f64).ceil() as usize
            }
        };
        eligible.truncate(count);
        eligible
    };
    (pick(0), pick(1))
}

/// Thresholds at which selected features are mapped back to the graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingScales {
    /// Median of finite deaths among selected H0 features (the cluster
    /// scale); falls back to the truncation value when none is finite.
    pub eps_h0: f64,
    /// Per selected H1 pair (index into the diagram): 0.99 x death, or the
    /// truncation value for essential classes.
    pub eps_per_loop: Vec<(usize, f64)>,
    pub used_tau_fallback: bool,
}

/// Lower median: for an even count the smaller of the two middle values.
fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

pub fn operating_scales(
    dgm: &PersistenceDiagram,
    b0: &[usize],
    b1: &[usize],
) -> OperatingScales {
    let mut finite_deaths: Vec<f64> = b0
        .iter()
        .filter_map(|&i| dgm.pairs[i].death)
        .collect();
    finite_deaths.sort_by(f64::total_cmp);
    let (eps_h0, used_tau_fallback) = if finite_deaths.is_empty() {
        (dgm.tau_value, true)
    } else {
        (lower_median(&finite_deaths), false)
    };
    let eps_per_loop = b1
        .iter()
        .map(|&i| {
            let eps = match dgm.pairs[i].death {
                Some(d) => 0.99 * d,
                None => dgm.tau_value,
            };
            (i, eps)
        })
        .collect();
    OperatingScales {
        eps_h0,
        eps_per_loop,
        used_tau_fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(u32, u32, f64)]) -> SparseMetricGraph {
        SparseMetricGraph {
            n,
            edges: edges.to_vec(),
            tau_value: edges.iter().map(|e| e.2).fold(0.0, f64::max),
        }
    }

    /// Unit square with both diagonals: sides 1, diagonals sqrt(2).
    fn square_with_diagonals() -> SparseMetricGraph {
        let s2 = 2.0f64.sqrt();
        graph(
            4,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (0, 3, 1.0),
                (0, 2, s2),
                (1, 3, s2),
            ],
        )
    }

    #[test]
    fn filtration_two_vertices_one_edge() {
        let f = build_filtration(&graph(2, &[(0, 1, 0.5)]));
        assert_eq!(f.simplices.len(), 3);
        assert_eq!(f.simplices[0].dimension(), 0);
        assert_eq!(f.simplices[2].value, 0.5);
        assert!(f.simplices.iter().all(|s| s.dimension() < 2));
    }

    #[test]
    fn filtration_square_has_four_triangles_at_diagonal_value() {
        let f = build_filtration(&square_with_diagonals());
        let triangles: Vec<&Simplex> =
            f.simplices.iter().filter(|s| s.dimension() == 2).collect();
        assert_eq!(triangles.len(), 4);
        for t in triangles {
            assert!((t.value - 2.0f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn filtration_triangle_single_two_simplex() {
        let f = build_filtration(&graph(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]));
        let triangles: Vec<&Simplex> =
            f.simplices.iter().filter(|s| s.dimension() == 2).collect();
        assert_eq!(triangles.len(), 1);
        assert_eq!(triangles[0].value, 1.0);
    }

    #[test]
    fn filtration_order_contract() {
        let f = build_filtration(&square_with_diagonals());
        for w in f.simplices.windows(2) {
            assert!(w[0].value <= w[1].value);
        }
        // every face precedes its cofaces
        let pos: HashMap<&[NodeId], usize> = f
            .simplices
            .iter()
            .enumerate()
            .map(|(i, s)| (s.verts.as_slice(), i))
            .collect();
        for (i, s) in f.simplices.iter().enumerate() {
            if s.verts.len() < 2 {
                continue;
            }
            for skip in 0..s.verts.len() {
                let face: Vec<NodeId> = s
                    .verts
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != skip)
                    .map(|(_, &v)| v)
                    .collect();
                assert!(pos[face.as_slice()] < i);
            }
        }
    }

    #[test]
    fn square_persistence() {
        let f = build_filtration(&square_with_diagonals());
        let dgm = compute_persistence(&f, 2.0f64.sqrt());
        let h1: Vec<&PersistencePair> = dgm.pairs_in_dim(1).collect();
        let persistent: Vec<&&PersistencePair> =
            h1.iter().filter(|p| p.lifespan() > 0.0).collect();
        assert_eq!(persistent.len(), 1);
        let p = persistent[0];
        assert!((p.birth - 1.0).abs() < 1e-9);
        assert!((p.death.unwrap() - 2.0f64.sqrt()).abs() < 1e-9);
        assert!((p.lifespan() - (2.0f64.sqrt() - 1.0)).abs() < 1e-9);

        let h0: Vec<&PersistencePair> = dgm.pairs_in_dim(0).collect();
        assert_eq!(h0.len(), 4);
        let finite: Vec<f64> = h0.iter().filter_map(|p| p.death).collect();
        assert_eq!(finite.len(), 3);
        assert!(finite.iter().all(|&d| (d - 1.0).abs() < 1e-9));
        assert_eq!(h0.iter().filter(|p| p.death.is_none()).count(), 1);
    }

    #[test]
    fn equilateral_triangle_no_persistent_h1() {
        let f = build_filtration(&graph(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]));
        let dgm = compute_persistence(&f, 1.0);
        assert!(dgm.pairs_in_dim(1).all(|p| p.lifespan() == 0.0));
    }

    #[test]
    fn open_square_essential_h1() {
        let f = build_filtration(&graph(
            4,
            &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)],
        ));
        let dgm = compute_persistence(&f, 1.0);
        let essential: Vec<&PersistencePair> =
            dgm.pairs_in_dim(1).filter(|p| p.death.is_none()).collect();
        assert_eq!(essential.len(), 1);
        let rep = essential[0].representative.as_ref().unwrap();
        assert_eq!(rep.len(), 4);
    }

    #[test]
    fn representative_is_a_cycle_at_birth() {
        let f = build_filtration(&square_with_diagonals());
        let dgm = compute_persistence(&f, 2.0f64.sqrt());
        for p in dgm.pairs_in_dim(1) {
            let rep = p.representative.as_ref().unwrap();
            let mut deg: HashMap<NodeId, usize> = HashMap::new();
            for &(u, v) in rep {
                *deg.entry(u).or_default() += 1;
                *deg.entry(v).or_default() += 1;
            }
            assert!(deg.values().all(|&d| d % 2 == 0), "odd degree in representative");
        }
    }

    #[test]
    fn union_find_matches_reduction() {
        let f = build_filtration(&square_with_diagonals());
        let dgm = compute_persistence(&f, 2.0f64.sqrt());
        let mut from_reduction: Vec<(f64, Option<f64>)> = dgm
            .pairs_in_dim(0)
            .map(|p| (p.birth, p.death))
            .collect();
        let mut from_uf = h0_via_union_find(&f);
        let key = |x: &(f64, Option<f64>)| (x.0, x.1.unwrap_or(f64::INFINITY));
        from_reduction.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        from_uf.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        assert_eq!(from_reduction.len(), from_uf.len());
        for (a, b) in from_reduction.iter().zip(&from_uf) {
            assert!((a.0 - b.0).abs() < 1e-12);
            match (a.1, b.1) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => panic!("finite/infinite mismatch"),
            }
        }
    }

    #[test]
    fn selection_by_lifespan() {
        let mk = |birth: f64, death: Option<f64>| PersistencePair {
            dimension: 1,
            birth,
            death,
            representative: Some(vec![]),
        };
        let dgm = PersistenceDiagram {
            pairs: vec![mk(0.0, Some(3.0)), mk(0.0, Some(2.0)), mk(0.0, Some(1.0))],
            tau_value: 3.0,
            params_hash: String::new(),
        };
        let (_, b1) = select_features(
            &dgm,
            &SelectionPolicy {
                mode: SelectionMode::TopK,
                k: 2,
                q: 0.0,
            },
        );
        let spans: Vec<f64> = b1.iter().map(|&i| dgm.pairs[i].lifespan()).collect();
        assert_eq!(spans, vec![3.0, 2.0]);
    }

    #[test]
    fn zero_lifespan_never_selected() {
        let dgm = PersistenceDiagram {
            pairs: vec![
                PersistencePair {
                    dimension: 1,
                    birth: 1.0,
                    death: Some(1.0),
                    representative: Some(vec![]),
                },
            ],
            tau_value: 1.0,
            params_hash: String::new(),
        };
        let (_, b1) = select_features(&dgm, &SelectionPolicy::default());
        assert!(b1.is_empty());
    }

    #[test]
    fn top_q_percent_count() {
        let pairs: Vec<PersistencePair> = (1..=10)
            .map(|i| PersistencePair {
                dimension: 1,
                birth: 0.0,
                death: Some(i as f64),
                representative: Some(vec![]),
            })
            .collect();
        let dgm = PersistenceDiagram {
            pairs,
            tau_value: 10.0,
            params_hash: String::new(),
        };
        let (_, b1) = select_features(
            &dgm,
            &SelectionPolicy {
                mode: SelectionMode::TopQPercent,
                k: 0,
                q: 20.0,
            },
        );
        assert_eq!(b1.len(), 2);
    }

    #[test]
    fn operating_scale_values() {
        let mk = |dim: u8, birth: f64, death: Option<f64>| PersistencePair {
            dimension: dim,
            birth,
            death,
            representative: if dim == 1 { Some(vec![]) } else { None },
        };
        let dgm = PersistenceDiagram {
            pairs: vec![
                mk(0, 0.0, Some(1.0)),
                mk(0, 0.0, Some(2.0)),
                mk(0, 0.0, Some(3.0)),
                mk(0, 0.0, Some(4.0)),
                mk(1, 1.0, Some(2.0f64.sqrt())),
            ],
            tau_value: 4.0,
            params_hash: String::new(),
        };
        let scales = operating_scales(&dgm, &[0, 1, 2, 3], &[4]);
        assert_eq!(scales.eps_h0, 2.0); // lower median of {1,2,3,4}
        assert!((scales.eps_per_loop[0].1 - 0.99 * 2.0f64.sqrt()).abs() < 1e-12);
        assert!((scales.eps_per_loop[0].1 - 1.40007).abs() < 1e-4);

        let constant = operating_scales(&dgm, &[0, 0, 0], &[]);
        assert_eq!(constant.eps_h0, 1.0);

        let fallback = operating_scales(&dgm, &[], &[]);
        assert!(fallback.used_tau_fallback);
        assert_eq!(fallback.eps_h0, 4.0);
    }
}
