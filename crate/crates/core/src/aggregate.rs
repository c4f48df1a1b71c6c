//! Final answer selection: hub-penalized, persistence-aware weighted voting
//! over skeleton nodes, plus advisory verification checks.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::canon::{canonicalize, equation_claims, parse_number};
use crate::error::Result;
use crate::graph::{HypothesisGraph, NodeId};
use crate::providers::{Budget, PairPayload, RelationOracle};
use crate::relation::RelationCode;
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteParams {
    /// Apply the x(1 + loop lifespan) boost to nodes on a spliced tour.
    /// Off gives the plain confidence/(1+degree) rule.
    pub persistence_factor: bool,
}

impl Default for VoteParams {
    fn default() -> Self {
        VoteParams {
            persistence_factor: true,
        }
    }
}

/// Hub-penalized vote weight of one skeleton node.
///
/// `degree` is the node's degree in the thresholded subgraph the skeleton
/// was built on. Nodes on a spliced verification tour get a persistence
/// boost of (1 + lifespan), with infinite lifespans truncated upstream.
pub fn vote_weight(
    confidence: f64,
    degree: usize,
    on_tour: bool,
    loop_lifespan: Option<f64>,
    params: &VoteParams,
) -> f64 {
    let base = confidence / (1.0 + degree as f64);
    if params.persistence_factor && on_tour {
        if let Some(lifespan) = loop_lifespan {
            return base * (1.0 + lifespan);
        }
    }
    base
}

/// Last boxed token (`boxed{...}`) or, failing that, the last numeric token
/// of `text`.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(pos) = text.rfind("boxed{") {
        let rest = &text[pos + "boxed{".len()..];
        if let Some(end) = rest.find('}') {
            let inner = rest[..end].trim();
            if !inner.is_empty() {
                return Some(inner.to_string());
            }
        }
    }
    let mut last: Option<String> = None;
    for token in text.split_whitespace() {
        let trimmed = token.trim_matches(|c: char| ",.;:!?()[]".contains(c));
        if trimmed.is_empty() {
            continue;
        }
        if parse_number(trimmed).is_some() {
            last = Some(trimmed.to_string());
        }
    }
    last
}

/// Trim, lowercase, canonical numeric form; the key answers are tallied by.
pub fn normalize_answer(s: &str) -> String {
    canonicalize(s.trim())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerVote {
    pub answer: String,
    pub weight: f64,
    pub confidence_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteTally {
    /// Per-answer totals, winner first.
    pub totals: Vec<AnswerVote>,
    /// `None` when no answer-bearing node exists anywhere.
    pub winner: Option<String>,
    /// Top weight minus runner-up weight (top weight if unopposed).
    pub margin: f64,
    pub node_weights: Vec<(NodeId, f64)>,
    /// True when no cluster survived and the vote fell back to the raw
    /// graph's terminal nodes.
    pub used_fallback: bool,
    /// Highest-weight node that voted for the winner.
    pub winner_node: Option<NodeId>,
}

/// Which answer a node contributes: its own answer field, or the pattern
/// extractor when the node sits at terminal progress for its skeleton.
fn node_answer(
    graph: &HypothesisGraph,
    node: NodeId,
    max_progress: f64,
    force_extract: bool,
) -> Option<String> {
    let n = &graph.nodes[node as usize];
    if let Some(a) = &n.answer {
        if !a.is_empty() {
            return Some(a.clone());
        }
    }
    if force_extract || n.progress == max_progress {
        return extract_answer(&n.text);
    }
    None
}

/// Tallies weighted votes over the distinct nodes of every skeleton.
///
/// With no skeletons the vote falls back to a confidence-weighted majority
/// over the raw graph's terminal nodes (last step of some path). Ties break
/// by higher total contributing confidence, then lexicographically smaller
/// answer.
pub fn aggregate_answers(
    skeletons: &[Skeleton],
    graph: &HypothesisGraph,
    degrees: &[usize],
    path_lengths: &HashMap<String, usize>,
    params: &VoteParams,
) -> VoteTally {
    let mut contributions: Vec<(NodeId, String, f64)> = Vec::new();
    let mut used_fallback = false;

    if !skeletons.is_empty() {
        for sk in skeletons {
            let distinct: BTreeSet<NodeId> = sk.path.iter().copied().collect();
            let max_progress = distinct
                .iter()
                .map(|&v| graph.nodes[v as usize].progress)
                .fold(f64::NEG_INFINITY, f64::max);
            let tour_set: BTreeSet<NodeId> = if sk.spliced {
                sk.tour.iter().copied().collect()
            } else {
                BTreeSet::new()
            };
            for &v in &distinct {
                let Some(raw) = node_answer(graph, v, max_progress, false) else {
                    continue;
                };
                let w = vote_weight(
                    graph.nodes[v as usize].confidence,
                    degrees[v as usize],
                    tour_set.contains(&v),
                    sk.loop_lifespan_capped,
                    params,
                );
                contributions.push((v, normalize_answer(&raw), w));
            }
        }
    }

    // Fall back to a confidence-weighted majority over the raw graph's
    // terminal nodes when no cluster survived, or when the surviving
    // skeletons carry no answer-bearing node at all.
    if contributions.is_empty() {
        used_fallback = true;
        for node in &graph.nodes {
            let terminal = node
                .provenance
                .iter()
                .any(|(pid, idx)| path_lengths.get(pid).is_some_and(|&m| *idx == m));
            if !terminal {
                continue;
            }
            if let Some(raw) = node_answer(graph, node.node_id, node.progress, true) {
                contributions.push((node.node_id, normalize_answer(&raw), node.confidence));
            }
        }
    }

    let mut by_answer: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (node, answer, weight) in &contributions {
        let entry = by_answer.entry(answer.clone()).or_insert((0.0, 0.0));
        entry.0 += weight;
        entry.1 += graph.nodes[*node as usize].confidence;
    }
    let mut totals: Vec<AnswerVote> = by_answer
        .into_iter()
        .map(|(answer, (weight, confidence_total))| AnswerVote {
            answer,
            weight,
            confidence_total,
        })
        .collect();
    totals.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(b.confidence_total.total_cmp(&a.confidence_total))
            .then(a.answer.cmp(&b.answer))
    });

    let winner = totals.first().map(|t| t.answer.clone());
    let margin = match totals.len() {
        0 => 0.0,
        1 => totals[0].weight,
        _ => totals[0].weight - totals[1].weight,
    };
    let winner_node = winner.as_ref().and_then(|w| {
        contributions
            .iter()
            .filter(|(_, a, _)| a == w)
            .max_by(|x, y| x.2.total_cmp(&y.2).then(y.0.cmp(&x.0)))
            .map(|(node, _, _)| *node)
    });

    VoteTally {
        totals,
        winner,
        margin,
        node_weights: contributions
            .iter()
            .map(|(node, _, w)| (*node, *w))
            .collect(),
        used_fallback,
        winner_node,
    }
}

/// Advisory checks run when a verification loop was spliced. Flags never
/// change the vote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationFlags {
    /// False when the oracle was unavailable for the entailment check.
    pub checked: bool,
    /// No two tour equations share a head with different numeric values.
    pub numeric_consistent: bool,
    /// Tour nodes whose relation to the winner node came back REFUTE.
    pub refuting_nodes: Vec<NodeId>,
}

/// Numeric-substitution and entailment checks along spliced tours.
pub fn verify_with_loop(
    tally: &VoteTally,
    skeletons: &[Skeleton],
    graph: &HypothesisGraph,
    oracle: &dyn RelationOracle,
    budget: &Budget,
) -> VerificationFlags {
    let tour_nodes: Vec<NodeId> = {
        let mut set = BTreeSet::new();
        for sk in skeletons.iter().filter(|s| s.spliced) {
            set.extend(sk.tour.iter().copied());
        }
        set.into_iter().collect()
    };

    // numeric check: same equation head, different numeric value
    let mut heads: HashMap<String, f64> = HashMap::new();
    let mut numeric_consistent = true;
    for &v in &tour_nodes {
        let canon = &graph.nodes[v as usize].canon;
        for (head, value) in equation_claims(canon) {
            match heads.get(head) {
                Some(&prev) if prev != value => numeric_consistent = false,
                _ => {
                    heads.insert(head.to_string(), value);
                }
            }
        }
    }

    let mut flags = VerificationFlags {
        checked: false,
        numeric_consistent,
        refuting_nodes: Vec::new(),
    };
    let Some(winner_node) = tally.winner_node else {
        return flags;
    };
    let pairs: Vec<PairPayload<'_>> = tour_nodes
        .iter()
        .filter(|&&v| v != winner_node)
        .map(|&v| PairPayload {
            text_a: &graph.nodes[winner_node as usize].text,
            text_b: &graph.nodes[v as usize].text,
            canon_a: &graph.nodes[winner_node as usize].canon,
            canon_b: &graph.nodes[v as usize].canon,
        })
        .collect();
    if pairs.is_empty() {
        flags.checked = true;
        return flags;
    }
    if !budget.try_acquire() {
        return flags; // over budget: leave unchecked
    }
    match oracle.label_chunk(&pairs) {
        Ok(outcome) => {
            flags.checked = true;
            let others: Vec<NodeId> = tour_nodes
                .iter()
                .copied()
                .filter(|&v| v != winner_node)
                .collect();
            for (v, code) in others.into_iter().zip(outcome.codes) {
                if code == RelationCode::Refute {
                    flags.refuting_nodes.push(v);
                }
            }
        }
        Err(_) => {
            flags.checked = false;
        }
    }
    flags
}

/// Verification metadata carried by a tally that is safe to serialize even
/// when no check ran.
pub fn verification_summary(flags: &Option<VerificationFlags>) -> Result<serde_json::Value> {
    Ok(match flags {
        None => serde_json::json!(null),
        Some(f) => serde_json::to_value(f)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HypothesisNode;

    fn mk_graph(nodes: Vec<(f64, f64, Option<&str>, &str)>) -> HypothesisGraph {
        // (confidence, progress, answer, text)
        HypothesisGraph {
            instance_id: "t".into(),
            nodes: nodes
                .into_iter()
                .enumerate()
                .map(|(i, (c, r, a, text))| HypothesisNode {
                    node_id: i as NodeId,
                    text: text.to_string(),
                    canon: canonicalize(text),
                    confidence: c,
                    progress: r,
                    provenance: vec![(format!("p{i}"), 1)],
                    answer: a.map(str::to_string),
                })
                .collect(),
            edges: vec![],
        }
    }

    fn plain_skeleton(path: Vec<NodeId>) -> Skeleton {
        Skeleton {
            cluster_index: 0,
            path,
            spliced: false,
            pivot: None,
            tour: vec![],
            backbone_cost: 0.0,
            cluster_size: 4,
            has_principal_loop: false,
            loop_lifespan: None,
            loop_lifespan_capped: None,
            covered_paths: vec![],
            avg_edge_weight: 0.0,
        }
    }

    #[test]
    fn weight_substitutions() {
        let p = VoteParams::default();
        assert!((vote_weight(0.9, 2, false, None, &p) - 0.3).abs() < 1e-12);
        assert!((vote_weight(0.9, 2, true, Some(0.5), &p) - 0.45).abs() < 1e-12);
        assert_eq!(vote_weight(0.0, 7, true, Some(0.5), &p), 0.0);
        let off = VoteParams {
            persistence_factor: false,
        };
        assert!((vote_weight(0.9, 2, true, Some(0.5), &off) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn extractor_takes_last_numeric_or_boxed() {
        assert_eq!(extract_answer("the answer is 42."), Some("42".into()));
        assert_eq!(extract_answer("first 3 then 7"), Some("7".into()));
        assert_eq!(extract_answer("so boxed{15} wins, not 9"), Some("15".into()));
        assert_eq!(extract_answer("no numbers here"), None);
    }

    #[test]
    fn answers_normalize_before_tally() {
        assert_eq!(normalize_answer("  4.0 "), "4");
        assert_eq!(normalize_answer("Four"), "four");
    }

    #[test]
    fn sums_and_argmax() {
        let g = mk_graph(vec![
            (0.3, 1.0, Some("4"), "a"),
            (0.4, 1.0, Some("4"), "b"),
            (0.5, 1.0, Some("5"), "c"),
        ]);
        let sk = plain_skeleton(vec![0, 1, 2]);
        let tally = aggregate_answers(
            &[sk],
            &g,
            &[0, 0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(tally.winner.as_deref(), Some("4"));
        assert!((tally.margin - 0.2).abs() < 1e-12);
    }

    #[test]
    fn exact_tie_breaks_lexicographically() {
        let g = mk_graph(vec![
            (0.5, 1.0, Some("5"), "a"),
            (0.5, 1.0, Some("4"), "b"),
        ]);
        let sk = plain_skeleton(vec![0, 1]);
        let tally = aggregate_answers(
            &[sk],
            &g,
            &[0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(tally.winner.as_deref(), Some("4"));
    }

    #[test]
    fn single_answer_margin_is_weight() {
        let g = mk_graph(vec![(0.9, 1.0, Some("7"), "a")]);
        let sk = plain_skeleton(vec![0]);
        let tally = aggregate_answers(
            &[sk],
            &g,
            &[2],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(tally.winner.as_deref(), Some("7"));
        assert!((tally.margin - 0.3).abs() < 1e-12);
    }

    #[test]
    fn fallback_votes_terminal_nodes() {
        let g = mk_graph(vec![
            (0.9, 1.0, Some("4"), "end one"),
            (0.2, 1.0, Some("5"), "end two"),
            (0.9, 0.5, Some("9"), "middle"),
        ]);
        let mut lengths = HashMap::new();
        lengths.insert("p0".to_string(), 1usize);
        lengths.insert("p1".to_string(), 1usize);
        lengths.insert("p2".to_string(), 2usize); // node 2 is step 1 of 2: not terminal
        let tally = aggregate_answers(
            &[],
            &g,
            &[0, 0, 0],
            &lengths,
            &VoteParams::default(),
        );
        assert!(tally.used_fallback);
        assert_eq!(tally.winner.as_deref(), Some("4"));
    }

    #[test]
    fn no_answer_anywhere_is_explicit() {
        let g = mk_graph(vec![(0.9, 1.0, None, "words only"), (0.9, 1.0, None, "more words")]);
        let sk = plain_skeleton(vec![0, 1]);
        let tally = aggregate_answers(
            &[sk],
            &g,
            &[0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(tally.winner, None);
        assert!(tally.totals.is_empty());
    }

    #[test]
    fn confidence_scaling_keeps_winner() {
        let mk = |scale: f64| {
            mk_graph(vec![
                (0.3 * scale, 1.0, Some("4"), "a"),
                (0.4 * scale, 1.0, Some("5"), "b"),
                (0.2 * scale, 1.0, Some("4"), "c"),
            ])
        };
        let sk = plain_skeleton(vec![0, 1, 2]);
        let w1 = aggregate_answers(
            &[sk.clone()],
            &mk(1.0),
            &[1, 1, 1],
            &HashMap::new(),
            &VoteParams::default(),
        );
        let w2 = aggregate_answers(
            &[sk],
            &mk(0.5),
            &[1, 1, 1],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(w1.winner, w2.winner);
    }

    #[test]
    fn duplicate_path_nodes_vote_once() {
        let g = mk_graph(vec![
            (0.5, 1.0, Some("4"), "a"),
            (0.5, 1.0, Some("5"), "b"),
        ]);
        // node 0 appears twice in the path (splice revisits the pivot)
        let sk = plain_skeleton(vec![0, 1, 0]);
        let tally = aggregate_answers(
            &[sk],
            &g,
            &[0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        // equal weights: tie broken lexicographically, so "4" only wins by
        // tie rule, not by double counting
        let four = tally.totals.iter().find(|t| t.answer == "4").unwrap();
        let five = tally.totals.iter().find(|t| t.answer == "5").unwrap();
        assert!((four.weight - five.weight).abs() < 1e-12);
    }

    #[test]
    fn verification_flags_advisory() {
        let g = mk_graph(vec![
            (0.9, 1.0, Some("4"), "x = 4"),
            (0.9, 0.5, None, "x = 5"),
            (0.9, 0.5, None, "y = 2"),
        ]);
        let mut sk = plain_skeleton(vec![0, 1, 2]);
        sk.spliced = true;
        sk.tour = vec![1, 2];
        let tally = aggregate_answers(
            &[sk.clone()],
            &g,
            &[0, 0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        assert_eq!(tally.winner.as_deref(), Some("4"));
        let budget = Budget::new(19, true);
        let flags = verify_with_loop(
            &tally,
            &[sk],
            &g,
            &crate::providers::RuleOracle,
            &budget,
        );
        assert!(flags.checked);
        // winner node says x=4, tour node 1 says x=5 -> refutation flagged
        assert_eq!(flags.refuting_nodes, vec![1]);
        // winner unchanged by flags (advisory): tally untouched by design
        assert_eq!(tally.winner.as_deref(), Some("4"));
    }

    #[test]
    fn numeric_inconsistency_detected_along_tour() {
        let g = mk_graph(vec![
            (0.9, 1.0, Some("4"), "x = 4"),
            (0.9, 0.5, None, "z = 5"),
            (0.9, 0.5, None, "z = 6"),
        ]);
        let mut sk = plain_skeleton(vec![0, 1, 2]);
        sk.spliced = true;
        sk.tour = vec![1, 2];
        let tally = aggregate_answers(
            &[sk.clone()],
            &g,
            &[0, 0, 0],
            &HashMap::new(),
            &VoteParams::default(),
        );
        let budget = Budget::new(19, true);
        let flags = verify_with_loop(&tally, &[sk], &g, &crate::providers::RuleOracle, &budget);
        assert!(!flags.numeric_consistent);
    }
}
