//! Exact bottleneck distance between persistence diagrams.
//!
//! Finite points use the classical construction: binary search over the
//! candidate cost set (pairwise L-infinity distances plus
//! distances-to-diagonal), feasibility decided by bipartite matching with
//! diagonal slots. Essential classes (infinite death) must match each other;
//! mismatched counts give an infinite distance.

use crate::homology::PersistenceDiagram;

#[derive(Debug, Clone, Copy)]
struct Point {
    birth: f64,
    death: f64,
}

impl Point {
    fn diag_cost(&self) -> f64 {
        (self.death - self.birth) / 2.0
    }
}

fn linf(a: Point, b: Point) -> f64 {
    (a.birth - b.birth).abs().max((a.death - b.death).abs())
}

pub fn bottleneck_distance(a: &PersistenceDiagram, b: &PersistenceDiagram, dim: u8) -> f64 {
    let mut finite_a = Vec::new();
    let mut finite_b = Vec::new();
    let mut essential_a = Vec::new();
    let mut essential_b = Vec::new();
    for p in a.pairs_in_dim(dim) {
        match p.death {
            Some(d) => finite_a.push(Point { birth: p.birth, death: d }),
            None => essential_a.push(p.birth),
        }
    }
    for p in b.pairs_in_dim(dim) {
        match p.death {
            Some(d) => finite_b.push(Point { birth: p.birth, death: d }),
            None => essential_b.push(p.birth),
        }
    }

    if essential_a.len() != essential_b.len() {
        return f64::INFINITY;
    }
    essential_a.sort_by(f64::total_cmp);
    essential_b.sort_by(f64::total_cmp);
    // Sorted order is optimal for 1-d L-infinity matching.
    let essential_cost = essential_a
        .iter()
        .zip(&essential_b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    finite_bottleneck(&finite_a, &finite_b).max(essential_cost)
}

fn finite_bottleneck(a: &[Point], b: &[Point]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut candidates: Vec<f64> = Vec::new();
    for &p in a {
        candidates.push(p.diag_cost());
        for &q in b {
            candidates.push(linf(p, q));
        }
    }
    for &q in b {
        candidates.push(q.diag_cost());
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut lo = 0;
    let mut hi = candidates.len() - 1;
    debug_assert!(feasible(a, b, candidates[hi]));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(a, b, candidates[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    candidates[lo]
}

/// Perfect matching test at cost `c`: left = points of A plus one diagonal
/// slot per B point; right = points of B plus one diagonal slot per A point.
fn feasible(a: &[Point], b: &[Point], c: f64) -> bool {
    let na = a.len();
    let nb = b.len();
    let left = na + nb; // (0..na) = A points, (na..) = diagonal slots for B
    let right = nb + na; // (0..nb) = B points, (nb..) = diagonal slots for A
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); left];
    for (i, &p) in a.iter().enumerate() {
        for (j, &q) in b.iter().enumerate() {
            if linf(p, q) <= c {
                adj[i].push(j);
            }
        }
        if p.diag_cost() <= c {
            adj[i].push(nb + i);
        }
    }
    for (j, &q) in b.iter().enumerate() {
        if q.diag_cost() <= c {
            adj[na + j].push(j);
        }
        // diagonal slots may always pair with the opposite diagonal
        for i in 0..na {
            adj[na + j].push(nb + i);
        }
    }
    let mut match_right: Vec<Option<usize>> = vec![None; right];
    let mut matched = 0;
    for u in 0..left {
        let mut visited = vec![false; right];
        if augment(u, &adj, &mut match_right, &mut visited) {
            matched += 1;
        }
    }
    matched == left
}

fn augment(
    u: usize,
    adj: &[Vec<usize>],
    match_right: &mut Vec<Option<usize>>,
    visited: &mut Vec<bool>,
) -> bool {
    for &v in &adj[u] {
        if visited[v] {
            continue;
        }
        visited[v] = true;
        if match_right[v].is_none()
            || augment(match_right[v].unwrap(), adj, match_right, visited)
        {
            match_right[v] = Some(u);
            return true;
        }
    }
    false
}
