//! Logical-relation inference between hypothesis nodes.
//!
//! Rather than labeling all O(|V|^2) pairs, a reduced candidate set is
//! built from derivation edges (longitudinal) plus unconnected pairs at the
//! same reasoning stage (lateral), chunked, and sent to a labeling oracle.
//! Labels become an additive distance term: REFUTE pushes pairs far apart
//! (+M), SUPPORT pulls them together (-W), NEUTRAL leaves the metric alone.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::canon::canon_hash;
use crate::error::Result;
use crate::graph::{HypothesisGraph, NodeId};
use crate::providers::{Budget, PairPayload, RelationOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationCode {
    #[serde(rename = "SUPPORT")]
    Support,
    #[serde(rename = "REFUTE")]
    Refute,
    #[serde(rename = "NEUTRAL")]
    Neutral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationParams {
    /// REFUTE magnitude; large enough that refuted pairs never co-cluster.
    pub m: f64,
    /// SUPPORT pull.
    pub w: f64,
    /// Pairs per oracle call.
    pub chunk_size: usize,
    /// Weight of the relation term inside the mixed distance.
    pub delta_logic: f64,
}

impl Default for RelationParams {
    fn default() -> Self {
        RelationParams {
            m: 1000.0,
            w: 1.0,
            chunk_size: 20,
            delta_logic: 1.0,
        }
    }
}

/// The reduced pair set submitted for labeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatePairSet {
    /// Existing derivation edges, in edge order, deduplicated.
    pub longitudinal: Vec<(NodeId, NodeId)>,
    /// Unconnected pairs with progress gap below `epsilon_lat`, ordered by id.
    pub lateral: Vec<(NodeId, NodeId)>,
    pub epsilon_lat: f64,
}

impl CandidatePairSet {
    pub fn len(&self) -> usize {
        self.longitudinal.len() + self.lateral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.longitudinal.iter().chain(self.lateral.iter()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub pair: (NodeId, NodeId),
    pub code: RelationCode,
}

pub fn build_candidate_pairs(graph: &HypothesisGraph, epsilon_lat: f64) -> CandidatePairSet {
    let mut longitudinal = Vec::new();
    let mut seen = HashSet::new();
    for e in &graph.edges {
        if e.kind == crate::graph::EdgeKind::Adjacency && seen.insert((e.src, e.dst)) {
            longitudinal.push((e.src, e.dst));
        }
    }
    let connected = graph.connected_pairs();
    let mut lateral = Vec::new();
    let n = graph.nodes.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let key = (i as NodeId, j as NodeId);
            if connected.contains(&key) {
                continue;
            }
            let dr = (graph.nodes[i].progress - graph.nodes[j].progress).abs();
            if dr < epsilon_lat {
                lateral.push(key);
            }
        }
    }
    CandidatePairSet {
        longitudinal,
        lateral,
        epsilon_lat,
    }
}

/// Splits the candidate pairs (longitudinal first, then lateral) into
/// chunks of `s`; the last chunk may be short.
pub fn chunk_pairs(set: &CandidatePairSet, s: usize) -> Vec<Vec<(NodeId, NodeId)>> {
    assert!(s >= 1, "chunk size must be >= 1");
    let all: Vec<(NodeId, NodeId)> = set.iter().collect();
    all.chunks(s).map(|c| c.to_vec()).collect()
}

pub fn relation_term(code: RelationCode, params: &RelationParams) -> f64 {
    match code {
        RelationCode::Refute => params.m,
        RelationCode::Support => -params.w,
        RelationCode::Neutral => 0.0,
    }
}

/// Assembled labels for one instance, keyed by unordered pair.
#[derive(Debug, Clone, Default)]
pub struct RelationTable {
    map: HashMap<(NodeId, NodeId), RelationCode>,
    /// Slots that degraded to NEUTRAL (oracle failure or garbage).
    pub warnings: usize,
    /// Chunks answered NEUTRAL because the call budget was exhausted.
    pub over_budget_chunks: usize,
}

impl RelationTable {
    pub fn code(&self, a: NodeId, b: NodeId) -> RelationCode {
        let key = (a.min(b), a.max(b));
        self.map.get(&key).copied().unwrap_or(RelationCode::Neutral)
    }

    pub fn term(&self, a: NodeId, b: NodeId, params: &RelationParams) -> f64 {
        relation_term(self.code(a, b), params)
    }

    pub fn insert(&mut self, a: NodeId, b: NodeId, code: RelationCode) {
        self.map.insert((a.min(b), a.max(b)), code);
    }

    pub fn labels(&self) -> Vec<RelationLabel> {
        let mut out: Vec<RelationLabel> = self
            .map
            .iter()
            .map(|(&pair, &code)| RelationLabel { pair, code })
            .collect();
        out.sort_by_key(|l| l.pair);
        out
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    src_canon_hash: String,
    dst_canon_hash: String,
    code: RelationCode,
}

/// Line-delimited label cache so reruns skip oracle calls.
#[derive(Debug, Default)]
pub struct RelationCache {
    map: HashMap<(String, String), RelationCode>,
}

impl RelationCache {
    pub fn load(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(line)?;
                map.insert((rec.src_canon_hash, rec.dst_canon_hash), rec.code);
            }
        }
        Ok(RelationCache { map })
    }

    pub fn get(&self, a_canon: &str, b_canon: &str) -> Option<RelationCode> {
        self.map
            .get(&(canon_hash(a_canon), canon_hash(b_canon)))
            .copied()
    }

    pub fn append(
        &mut self,
        path: &Path,
        entries: &[(String, String, RelationCode)],
    ) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        for (a, b, code) in entries {
            let rec = CacheRecord {
                src_canon_hash: a.clone(),
                dst_canon_hash: b.clone(),
                code: *code,
            };
            writeln!(file, "{}", serde_json::to_string(&rec)?)?;
            self.map.insert((a.clone(), b.clone()), *code);
        }
        Ok(())
    }
}

/// Labels every candidate pair: cached labels are reused, the rest are
/// chunked and sent through the oracle under the budget. Oracle failures
/// and over-budget chunks degrade to NEUTRAL.
pub fn label_all(
    graph: &HypothesisGraph,
    set: &CandidatePairSet,
    params: &RelationParams,
    oracle: &dyn RelationOracle,
    budget: &Budget,
    cache: Option<&mut RelationCache>,
    cache_path: Option<&Path>,
) -> Result<RelationTable> {
    let mut table = RelationTable::default();
    let mut pending: Vec<(NodeId, NodeId)> = Vec::new();

    let cache_ref: Option<&RelationCache> = cache.as_deref();
    for (a, b) in set.iter() {
        let hit = cache_ref.and_then(|c| {
            c.get(
                &graph.nodes[a as usize].canon,
                &graph.nodes[b as usize].canon,
            )
        });
        match hit {
            Some(code) => table.insert(a, b, code),
            None => pending.push((a, b)),
        }
    }

    let mut fresh: Vec<(String, String, RelationCode)> = Vec::new();
    for chunk in pending.chunks(params.chunk_size.max(1)) {
        if !budget.try_acquire() {
            table.over_budget_chunks += 1;
            for &(a, b) in chunk {
                table.insert(a, b, RelationCode::Neutral);
            }
            continue;
        }
        let payloads: Vec<PairPayload<'_>> = chunk
            .iter()
            .map(|&(a, b)| PairPayload {
                text_a: &graph.nodes[a as usize].text,
                text_b: &graph.nodes[b as usize].text,
                canon_a: &graph.nodes[a as usize].canon,
                canon_b: &graph.nodes[b as usize].canon,
            })
            .collect();
        match oracle.label_chunk(&payloads) {
            Ok(outcome) => {
                table.warnings += outcome.warnings;
                for (&(a, b), code) in chunk.iter().zip(outcome.codes) {
                    table.insert(a, b, code);
                    fresh.push((
                        canon_hash(&graph.nodes[a as usize].canon),
                        canon_hash(&graph.nodes[b as usize].canon),
                        code,
                    ));
                }
            }
            Err(_) => {
                table.warnings += chunk.len();
                for &(a, b) in chunk {
                    table.insert(a, b, RelationCode::Neutral);
                }
            }
        }
    }

    if let (Some(cache), Some(path)) = (cache, cache_path) {
        if !fresh.is_empty() {
            cache.append(path, &fresh)?;
        }
    }
    Ok(table)
}
