//! Global hypothesis graph: similarity-gated node merging over all sampled
//! paths of an instance, with adjacency edges inherited from path order.
//!
//! Construction is a streaming merge: each incoming step is compared against
//! every existing node's canonical form and either merged into the best match
//! or appended as a new node. Node ids are creation-order integers, which
//! makes serialized graphs stable across runs.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::canon::{canonicalize, token_set};
use crate::error::{Error, Result};
use crate::providers::Embedder;
use crate::trace::{effective_progress, ProblemInstance};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Adjacency,
    Support,
    Refute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisNode {
    pub node_id: NodeId,
    pub text: String,
    pub canon: String,
    pub confidence: f64,
    pub progress: f64,
    /// (path_id, 1-based step index) of every source step merged here.
    pub provenance: Vec<(String, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGraph {
    pub instance_id: String,
    pub nodes: Vec<HypothesisNode>,
    pub edges: Vec<HypothesisEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    CanonJaccard,
    EmbeddingCosine,
    Blend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergePolicy {
    pub theta_merge: f64,
    pub similarity_mode: SimilarityMode,
    pub blend_weight: f64,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy {
            theta_merge: 0.85,
            similarity_mode: SimilarityMode::CanonJaccard,
            blend_weight: 0.5,
        }
    }
}

/// Token-set Jaccard of two canon strings; 1 when both are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let ta = token_set(a);
    let tb = token_set(b);
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Similarity of two canon strings in `[0,1]` under the policy's mode.
///
/// Embedding-based modes need the two vectors; omitting them is a
/// configuration error.
pub fn similarity(
    a: &str,
    b: &str,
    policy: &MergePolicy,
    embeddings: Option<(&[f64], &[f64])>,
) -> Result<f64> {
    match policy.similarity_mode {
        SimilarityMode::CanonJaccard => Ok(jaccard(a, b)),
        SimilarityMode::EmbeddingCosine => {
            let (ea, eb) = embeddings.ok_or_else(|| {
                Error::Config("embedding_cosine similarity requires embeddings".into())
            })?;
            Ok(cosine(ea, eb).clamp(0.0, 1.0))
        }
        SimilarityMode::Blend => {
            let (ea, eb) = embeddings.ok_or_else(|| {
                Error::Config("blend similarity requires embeddings".into())
            })?;
            let cos = cosine(ea, eb).clamp(0.0, 1.0);
            Ok(policy.blend_weight * cos + (1.0 - policy.blend_weight) * jaccard(a, b))
        }
    }
}

impl HypothesisNode {
    /// Folds one more source step into a node that already passed the
    /// similarity gate. Confidence is the running mean over all sources
    /// (count taken from provenance, so merge order cannot bias it),
    /// progress is the max, and text/canon/answer keep first-seen values.
    pub fn merge_source(
        &mut self,
        confidence: f64,
        progress: f64,
        provenance: (String, usize),
        answer: Option<&str>,
    ) {
        let n = self.provenance.len() as f64;
        self.confidence = (self.confidence * n + confidence) / (n + 1.0);
        self.progress = self.progress.max(progress);
        self.provenance.push(provenance);
        if self.answer.is_none() {
            if let Some(a) = answer {
                if !a.is_empty() {
                    self.answer = Some(a.to_string());
                }
            }
        }
    }
}

impl HypothesisGraph {
    /// Adjacency lists over directed adjacency edges only.
    pub fn out_adjacency(&self) -> Vec<Vec<NodeId>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if e.kind == EdgeKind::Adjacency {
                adj[e.src as usize].push(e.dst);
            }
        }
        adj
    }

    /// Undirected multigraph degree per node; parallel adjacency edges
    /// (the same hop taken by several merged paths) each count.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            if e.kind == EdgeKind::Adjacency {
                deg[e.src as usize] += 1;
                deg[e.dst as usize] += 1;
            }
        }
        deg
    }

    /// Unordered node-id pairs connected by at least one adjacency edge.
    pub fn connected_pairs(&self) -> std::collections::HashSet<(NodeId, NodeId)> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Adjacency)
            .map(|e| (e.src.min(e.dst), e.src.max(e.dst)))
            .collect()
    }

    /// Node ids whose provenance contains a path's first step.
    pub fn start_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.provenance.iter().any(|(_, idx)| *idx == 1))
            .map(|n| n.node_id)
            .collect()
    }

    /// Appends inferred relation edges (for reporting); endpoints must exist.
    pub fn add_relation_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) {
        debug_assert!((src as usize) < self.nodes.len());
        debug_assert!((dst as usize) < self.nodes.len());
        self.edges.push(HypothesisEdge { src, dst, kind });
    }
}

/// Builds the merged hypothesis graph for one instance.
///
/// Paths and steps are consumed in file order; the merge is therefore
/// deterministic. Best-match ties break toward the earliest-created node.
/// `embedder` is only consulted for embedding-based similarity modes.
pub fn build_graph(
    instance: &ProblemInstance,
    policy: &MergePolicy,
    embedder: Option<&dyn Embedder>,
) -> Result<HypothesisGraph> {
    if policy.similarity_mode != SimilarityMode::CanonJaccard && embedder.is_none() {
        return Err(Error::Config(
            "embedding-based similarity mode requires an embedder".into(),
        ));
    }
    let mut nodes: Vec<HypothesisNode> = Vec::new();
    let mut edges: Vec<HypothesisEdge> = Vec::new();
    let mut embed_cache: HashMap<String, Vec<f64>> = HashMap::new();

    let embed_of = |canon: &str,
                        cache: &mut HashMap<String, Vec<f64>>|
     -> Result<Option<Vec<f64>>> {
        match embedder {
            None => Ok(None),
            Some(provider) => {
                if let Some(v) = cache.get(canon) {
                    return Ok(Some(v.clone()));
                }
                let v = provider
                    .embed(&[canon.to_string()])?
                    .pop()
                    .ok_or_else(|| Error::Provider("embedder returned no vector".into()))?;
                cache.insert(canon.to_string(), v.clone());
                Ok(Some(v))
            }
        }
    };

    for path in &instance.paths {
        let mut prev: Option<NodeId> = None;
        for (j0, step) in path.steps.iter().enumerate() {
            let j = j0 + 1;
            let canon = canonicalize(&step.text);
            let progress = effective_progress(path, j)?;
            let step_embed = if policy.similarity_mode == SimilarityMode::CanonJaccard {
                None
            } else {
                embed_of(&canon, &mut embed_cache)?
            };

            // Best canonical match among existing nodes, ties to lowest id.
            let mut best: Option<(NodeId, f64)> = None;
            for node in &nodes {
                let node_embed = if policy.similarity_mode == SimilarityMode::CanonJaccard {
                    None
                } else {
                    embed_of(&node.canon, &mut embed_cache)?
                };
                let pair = match (&step_embed, &node_embed) {
                    (Some(a), Some(b)) => Some((a.as_slice(), b.as_slice())),
                    _ => None,
                };
                let sim = similarity(&canon, &node.canon, policy, pair)?;
                let better = match best {
                    None => true,
                    Some((_, best_sim)) => sim > best_sim,
                };
                if better {
                    best = Some((node.node_id, sim));
                }
            }

            let current = match best {
                Some((id, sim)) if sim > policy.theta_merge => {
                    nodes[id as usize].merge_source(
                        step.confidence,
                        progress,
                        (path.path_id.clone(), j),
                        step.answer.as_deref(),
                    );
                    id
                }
                _ => {
                    let id = nodes.len() as NodeId;
                    nodes.push(HypothesisNode {
                        node_id: id,
                        text: step.text.clone(),
                        canon,
                        confidence: step.confidence,
                        progress,
                        provenance: vec![(path.path_id.clone(), j)],
                        answer: step.answer.clone().filter(|a| !a.is_empty()),
                    });
                    id
                }
            };

            if let Some(p) = prev {
                // Merging consecutive steps into one node would otherwise
                // create a self-loop; adjacency edges require src != dst.
                if p != current {
                    edges.push(HypothesisEdge {
                        src: p,
                        dst: current,
                        kind: EdgeKind::Adjacency,
                    });
                }
            }
            prev = Some(current);
        }
    }

    Ok(HypothesisGraph {
        instance_id: instance.instance_id.clone(),
        nodes,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ReasoningPath, ReasoningStep};

    fn step(text: &str, confidence: f64) -> ReasoningStep {
        ReasoningStep {
            text: text.to_string(),
            confidence,
            answer: None,
            raw_progress: None,
        }
    }

    fn instance(paths: Vec<Vec<ReasoningStep>>) -> ProblemInstance {
        ProblemInstance {
            instance_id: "t".into(),
            question: "q".into(),
            gold_answer: None,
            paths: paths
                .into_iter()
                .enumerate()
                .map(|(i, steps)| ReasoningPath {
                    path_id: format!("p{i}"),
                    steps,
                })
                .collect(),
        }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard("a b c", "a b c"), 1.0);
        assert_eq!(jaccard("a b c", "d e f"), 0.0);
        assert_eq!(jaccard("a b c", "b c d"), 0.5);
        assert_eq!(jaccard("", ""), 1.0);
    }

    #[test]
    fn similarity_identity_is_one() {
        let policy = MergePolicy::default();
        assert_eq!(similarity("x y", "x y", &policy, None).unwrap(), 1.0);
    }

    #[test]
    fn blend_without_embeddings_is_config_error() {
        let policy = MergePolicy {
            similarity_mode: SimilarityMode::Blend,
            ..MergePolicy::default()
        };
        assert!(matches!(
            similarity("a", "b", &policy, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_paths_merge_fully() {
        let steps = vec![step("one two", 0.8), step("three four", 0.6), step("five six", 0.4)];
        let inst = instance(vec![steps.clone(), steps]);
        let g = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(g.nodes.len(), 3);
        for n in &g.nodes {
            assert_eq!(n.provenance.len(), 2);
        }
    }

    #[test]
    fn single_path_is_a_chain() {
        let inst = instance(vec![vec![
            step("alpha beta", 0.5),
            step("gamma delta", 0.5),
            step("epsilon zeta", 0.5),
            step("eta theta", 0.5),
        ]]);
        let g = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 3);
        for (i, e) in g.edges.iter().enumerate() {
            assert_eq!((e.src, e.dst), (i as NodeId, i as NodeId + 1));
        }
    }

    #[test]
    fn strict_threshold_never_merges() {
        let steps = vec![step("same text here", 0.5), step("same text here", 0.5)];
        let inst = instance(vec![steps.clone(), steps]);
        let policy = MergePolicy {
            theta_merge: 1.0,
            ..MergePolicy::default()
        };
        let g = build_graph(&inst, &policy, None).unwrap();
        assert_eq!(g.nodes.len(), 4); // sum of m_i, merge gate never fires
    }

    #[test]
    fn merged_confidence_is_mean_and_progress_is_max() {
        let mut a = vec![step("shared step text", 0.8)];
        a[0].raw_progress = Some(0.3);
        let mut b = vec![step("shared step text", 0.6)];
        b[0].raw_progress = Some(0.9);
        let inst = instance(vec![a, b]);
        let g = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!((g.nodes[0].confidence - 0.7).abs() < 1e-12);
        assert!((g.nodes[0].progress - 0.9).abs() < 1e-12);
    }

    #[test]
    fn three_way_merge_uses_full_mean() {
        let mk = |c| vec![step("the same hypothesis", c)];
        let inst = instance(vec![mk(0.9), mk(0.6), mk(0.6)]);
        let g = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!((g.nodes[0].confidence - 0.7).abs() < 1e-12);
    }

    #[test]
    fn consecutive_merge_skips_self_loop() {
        let inst = instance(vec![vec![step("same thing", 0.5), step("same thing", 0.5)]]);
        let g = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn determinism_byte_identical() {
        let steps = vec![step("a b", 0.5), step("b c", 0.7), step("c d", 0.2)];
        let inst = instance(vec![steps.clone(), steps]);
        let g1 = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        let g2 = build_graph(&inst, &MergePolicy::default(), None).unwrap();
        assert_eq!(
            serde_json::to_string(&g1).unwrap(),
            serde_json::to_string(&g2).unwrap()
        );
    }
}
