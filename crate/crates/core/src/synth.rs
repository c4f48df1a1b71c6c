//! Synthetic trace corpus with planted ground truth.
//!
//! The generator uses a controlled template grammar so canonicalization and
//! merging behave predictably: backbone paths share a canonical chain to the
//! planted answer, an optional verification ring makes two paths diverge and
//! reconverge through semantically ring-shaped steps, and distractor paths
//! live in their own token namespace with a wrong answer.
//!
//! Step confidences are derived deterministically from each step's canonical
//! text (base by role, plus a small text-keyed jitter), mimicking an upstream
//! scorer that is sensitive to surface form. `apply_confidence_model` re-runs
//! that scoring, which is what makes paraphrase-robustness experiments
//! meaningful on frozen traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canon::{canonicalize, parse_number};
use crate::error::{Error, Result};
use crate::providers::fnv1a;
use crate::trace::{ProblemInstance, ReasoningPath, ReasoningStep};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub instances: usize,
    /// Backbone paths per instance (N).
    pub paths: usize,
    /// Steps per backbone path.
    pub backbone_len: usize,
    pub distractors: usize,
    /// Steps per distractor path.
    pub distractor_len: usize,
    /// Paraphrase token-swap rate applied per path at generation time.
    pub noise: f64,
    pub planted_loop: bool,
    pub answer: String,
    pub wrong_answer: String,
    pub backbone_confidence: f64,
    pub distractor_confidence: f64,
    /// Half-width of the text-keyed confidence jitter.
    pub confidence_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            instances: 10,
            paths: 3,
            backbone_len: 48,
            distractors: 2,
            distractor_len: 20,
            noise: 0.0,
            planted_loop: true,
            answer: "42".into(),
            wrong_answer: "13".into(),
            backbone_confidence: 0.9,
            distractor_confidence: 0.3,
            confidence_jitter: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.paths == 0 || self.backbone_len == 0 {
            return Err(Error::Config("instances, paths, backbone_len must be positive".into()));
        }
        if self.planted_loop && self.paths < 3 {
            return Err(Error::Config(
                "planted loop needs at least 3 paths (multi-path reconvergence)".into(),
            ));
        }
        if self.planted_loop && self.backbone_len < 4 {
            return Err(Error::Config(
                "planted loop needs backbone_len >= 4 (chain on both sides of the ring)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Token swaps understood by the paraphraser; symmetric pairs.
const SYNONYMS: &[(&str, &str)] = &[
    ("derive", "obtain"),
    ("from", "via"),
    ("step", "stage"),
    ("conclude", "determine"),
    ("answer", "result"),
    ("check", "verify"),
    ("guess", "suppose"),
    ("holds", "stands"),
];

fn synonym_of(token: &str) -> Option<&'static str> {
    for &(a, b) in SYNONYMS {
        if token == a {
            return Some(b);
        }
        if token == b {
            return Some(a);
        }
    }
    None
}

fn unit_hash(text: &str) -> f64 {
    fnv1a(text.as_bytes()) as f64 / u64::MAX as f64
}

fn role_base(path_id: &str, config: &SynthConfig) -> f64 {
    if path_id.starts_with('d') {
        config.distractor_confidence
    } else {
        config.backbone_confidence
    }
}

/// Deterministic confidence of one step: role base plus a jitter keyed on
/// the canonical text.
pub fn model_confidence(path_id: &str, text: &str, config: &SynthConfig) -> f64 {
    let base = role_base(path_id, config);
    let jitter = (unit_hash(&canonicalize(text)) - 0.5) * 2.0 * config.confidence_jitter;
    (base + jitter).clamp(0.01, 0.99)
}

/// Recomputes every step confidence from its (possibly rewritten) text,
/// exactly as `generate` would have scored it.
pub fn apply_confidence_model(instances: &mut [ProblemInstance], config: &SynthConfig) {
    for inst in instances {
        for path in &mut inst.paths {
            for step in &mut path.steps {
                step.confidence = model_confidence(&path.path_id, &step.text, config);
            }
        }
    }
}

// The grammar keeps numerals out of every non-terminal step (the answer
// extractor keys on numeric tokens) and codes positions as opaque markers
// like `i3n7`, which canonicalization leaves alone.

// Backbone and distractor steps state an explicit claim token
// (`c{inst}={answer}`); the rule oracle reads these as equation claims, so
// wrong-answer paths REFUTE the backbone and each other at shared stages,
// and the relation term pushes them apart exactly as contradicting
// hypotheses should be.

fn chain_step_text(inst: usize, j: usize, total: usize, answer: &str) -> String {
    if j + 1 == total {
        // the last derivation step already names the answer, so skeletons
        // that lose the terminal node to truncation still carry it
        format!(
            "derive part i{inst}n{j} from part i{inst}n{} giving answer {answer}",
            j - 1
        )
    } else {
        format!(
            "derive part i{inst}n{j} from part i{inst}n{} toward c{inst}={answer}",
            j - 1
        )
    }
}

fn terminal_step_text(inst: usize, j: usize, answer: &str) -> String {
    format!(
        "derive part i{inst}n{j} from part i{inst}n{} so the answer is {answer}",
        j - 1
    )
}

fn echo_step_text(inst: usize, j: usize, answer: &str) -> String {
    format!(
        "derive part i{inst}n{j} from part i{inst}n{} echo the answer is {answer}",
        j - 1
    )
}

// The planted verification loop is a six-step checkpoint excursion spliced
// into the middle of every backbone path. Most paths walk the checkpoints
// forward; one walks them in reverse (a re-verification pass), which closes
// the cycle through the junction steps and keeps every ring node's degree
// equal to the chain's. Checkpoint texts use a cyclic two-token vocabulary:
// adjacent checkpoints share a token, non-adjacent share none, so the cycle
// is metrically round. All ring steps carry the same raw_progress (they sit
// at one reasoning stage), which keeps the progress feature from stretching
// the ring.

const RING_LEN: usize = 6;
const RING_PROGRESS: f64 = 0.5;

fn ring_step_text(inst: usize, k: usize, anchor: usize) -> String {
    let next = (k + 1) % RING_LEN;
    if k == 0 || k == RING_LEN - 1 {
        // junction checkpoints share scaffold tokens with the chain step
        // they branch from, so the excursion stays attached to the chain
        format!("checkpoint w{inst}r{k} w{inst}r{next} from part i{inst}n{anchor}")
    } else {
        format!("w{inst}r{k} w{inst}r{next}")
    }
}

// Each distractor path gets a fully private vocabulary (even the filler
// token carries the family id); two wrong-answer paths must not look like
// corroborating evidence for each other.

fn distractor_step_text(inst: usize, d: usize, j: usize, answer: &str) -> String {
    format!(
        "u{inst}d{d}v{j} after{d} u{inst}d{d}v{} toward c{inst}={answer}",
        j - 1
    )
}

fn distractor_terminal_text(inst: usize, d: usize, j: usize, answer: &str) -> String {
    // scaffold identical to interior steps: the wrong conclusion should sit
    // inside its family, not float as an artificially low-degree outlier
    format!(
        "u{inst}d{d}v{j} after{d} u{inst}d{d}v{} toward c{inst}={answer}",
        j - 1
    )
}

/// Each distractor family claims its own wrong answer.
fn wrong_answer_for(base: &str, d: usize) -> String {
    match base.parse::<i64>() {
        Ok(n) => (n + d as i64).to_string(),
        Err(_) => format!("{base}{d}"),
    }
}

/// Generates the seeded corpus. Identical config (seed included) yields a
/// byte-identical trace file.
pub fn generate(config: &SynthConfig) -> Result<Vec<ProblemInstance>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.instances);
    for inst_idx in 0..config.instances {
        let mut paths: Vec<ReasoningPath> = Vec::new();
        let total = config.backbone_len;
        // the ring excursion is inserted after the chain midpoint
        let ring_anchor = total / 2;
        for p in 0..config.paths {
            let mut steps = Vec::new();
            for j in 1..=total {
                let text = if j == total {
                    terminal_step_text(inst_idx, j, &config.answer)
                } else {
                    chain_step_text(inst_idx, j, total, &config.answer)
                };
                let answer = (j == total).then(|| config.answer.clone());
                steps.push(ReasoningStep {
                    text,
                    confidence: 0.5, // overwritten by the confidence model below
                    answer,
                    raw_progress: None,
                });
                if config.planted_loop && j == ring_anchor {
                    // path index 1 re-walks the checkpoints in reverse
                    let order: Vec<usize> = if p == 1 {
                        (0..RING_LEN).rev().collect()
                    } else {
                        (0..RING_LEN).collect()
                    };
                    for k in order {
                        steps.push(ReasoningStep {
                            text: ring_step_text(inst_idx, k, ring_anchor),
                            confidence: 0.5,
                            answer: None,
                            raw_progress: Some(RING_PROGRESS),
                        });
                    }
                }
            }
            // every backbone path restates the conclusion twice; the second
            // echo absorbs the endpoint-degree penalty so the first sits in
            // the chain cluster as an ordinary answer-bearing member
            for extra in 1..=2 {
                steps.push(ReasoningStep {
                    text: echo_step_text(inst_idx, total + extra, &config.answer),
                    confidence: 0.5,
                    answer: Some(config.answer.clone()),
                    raw_progress: None,
                });
            }
            paths.push(ReasoningPath {
                path_id: format!("p{p}"),
                steps,
            });
        }
        for d in 0..config.distractors {
            // families differ in shape (geometrically shrinking lengths) and
            // contradict each other's claims, so they are neither mergeable
            // nor mutually corroborating
            let len = (config.distractor_len >> d).max(4);
            let wrong = wrong_answer_for(&config.wrong_answer, d);
            let mut steps = Vec::with_capacity(len);
            for j in 1..=len {
                let text = if j == len {
                    distractor_terminal_text(inst_idx, d, j, &wrong)
                } else {
                    distractor_step_text(inst_idx, d, j, &wrong)
                };
                let answer = (j == len).then(|| wrong.clone());
                steps.push(ReasoningStep {
                    text,
                    confidence: 0.5,
                    answer,
                    raw_progress: None,
                });
            }
            paths.push(ReasoningPath {
                path_id: format!("d{d}"),
                steps,
            });
        }
        let mut instance = ProblemInstance {
            instance_id: format!("synth-{inst_idx:04}"),
            question: format!("what is the value in case {inst_idx}?"),
            gold_answer: Some(config.answer.clone()),
            paths,
        };
        if config.noise > 0.0 {
            // per-path noise keyed on (seed, instance, path) so paths
            // paraphrase independently
            for (pi, path) in instance.paths.iter_mut().enumerate() {
                let path_seed = config
                    .seed
                    .wrapping_add(fnv1a(format!("{inst_idx}/{pi}").as_bytes()));
                let mut rng = ChaCha8Rng::seed_from_u64(path_seed);
                for step in &mut path.steps {
                    step.text = paraphrase_text(&step.text, config.noise, &mut rng);
                }
            }
        }
        apply_confidence_model(std::slice::from_mut(&mut instance), config);
        instance.validate()?;
        out.push(instance);
    }
    Ok(out)
}

fn paraphrase_text<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let tokens: Vec<String> = text
        .split(' ')
        .map(|token| {
            if parse_number(token.trim_matches(|c: char| ",.;:!?".contains(c))).is_some() {
                return token.to_string(); // numerics are never touched
            }
            if let Some(swap) = synonym_of(&token.to_lowercase()) {
                if rng.gen::<f64>() < rate {
                    return swap.to_string();
                }
                return token.to_string();
            }
            if token.chars().next().is_some_and(|c| c.is_alphabetic())
                && rng.gen::<f64>() < rate
            {
                // casing flip; canonicalization erases it, so this only
                // stresses surface-form handling
                let mut chars = token.chars();
                let first = chars.next().unwrap();
                let flipped: String = if first.is_uppercase() {
                    first.to_lowercase().collect()
                } else {
                    first.to_uppercase().collect()
                };
                return format!("{flipped}{}", chars.as_str());
            }
            token.to_string()
        })
        .collect();
    tokens.join(" ")
}

/// Rewrites step texts with synonym swaps and casing flips at `rate`,
/// leaving numeric tokens and all non-text fields untouched. Deterministic
/// under `seed`.
pub fn perturb_paraphrase(
    instances: &[ProblemInstance],
    rate: f64,
    seed: u64,
) -> Result<Vec<ProblemInstance>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config("paraphrase rate must be in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = instances.to_vec();
    for inst in &mut out {
        for path in &mut inst.paths {
            for step in &mut path.steps {
                step.text = paraphrase_text(&step.text, rate, &mut rng);
            }
        }
    }
    Ok(out)
}

/// Numeric tokens of a text, in order (the multiset the paraphraser must
/// preserve).
pub fn numeric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|t| {
            let trimmed = t.trim_matches(|c: char| ",.;:!?".contains(c));
            parse_number(trimmed).map(|_| trimmed.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::to_jsonl;

    #[test]
    fn deterministic_under_seed() {
        let config = SynthConfig {
            instances: 3,
            noise: 0.5,
            ..SynthConfig::default()
        };
        let a = to_jsonl(&generate(&config).unwrap()).unwrap();
        let b = to_jsonl(&generate(&config).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_validates_and_has_planted_answer() {
        let config = SynthConfig::default();
        let instances = generate(&config).unwrap();
        assert_eq!(instances.len(), config.instances);
        for inst in &instances {
            inst.validate().unwrap();
            assert_eq!(inst.gold_answer.as_deref(), Some("42"));
            assert_eq!(inst.paths.len(), config.paths + config.distractors);
            let last = inst.paths[0].steps.last().unwrap();
            assert_eq!(last.answer.as_deref(), Some("42"));
        }
    }

    #[test]
    fn zero_noise_backbone_merges_fully() {
        use crate::graph::{build_graph, MergePolicy};
        let config = SynthConfig {
            instances: 1,
            planted_loop: false,
            distractors: 0,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let instances = generate(&config).unwrap();
        let g = build_graph(&instances[0], &MergePolicy::default(), None).unwrap();
        // identical backbone texts merge into a single chain
        assert_eq!(g.nodes.len(), config.backbone_len);
        for n in &g.nodes {
            assert_eq!(n.provenance.len(), config.paths);
        }
    }

    #[test]
    fn planted_loop_creates_graph_cycle() {
        use crate::graph::{build_graph, MergePolicy};
        let config = SynthConfig {
            instances: 1,
            distractors: 0,
            ..SynthConfig::default()
        };
        let instances = generate(&config).unwrap();
        let g = build_graph(&instances[0], &MergePolicy::default(), None).unwrap();
        // undirected cycle detection: a connected component with E >= V has a cycle
        let mut parent: Vec<usize> = (0..g.nodes.len()).collect();
        fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut cycle = false;
        let mut seen = std::collections::HashSet::new();
        for e in &g.edges {
            if !seen.insert((e.src.min(e.dst), e.src.max(e.dst))) {
                continue;
            }
            let a = find(&mut parent, e.src as usize);
            let b = find(&mut parent, e.dst as usize);
            if a == b {
                cycle = true;
            } else {
                parent[a] = b;
            }
        }
        assert!(cycle, "planted loop must appear as a cycle in the merged graph");

        // and the cycle runs through nodes merged from at least 2 paths
        let multi_path_nodes = g
            .nodes
            .iter()
            .filter(|n| {
                let paths: std::collections::HashSet<&str> =
                    n.provenance.iter().map(|(p, _)| p.as_str()).collect();
                paths.len() >= 2
            })
            .count();
        assert!(multi_path_nodes >= 2);
    }

    #[test]
    fn paraphrase_rate_zero_is_identity() {
        let config = SynthConfig {
            instances: 2,
            ..SynthConfig::default()
        };
        let instances = generate(&config).unwrap();
        let out = perturb_paraphrase(&instances, 0.0, 7).unwrap();
        assert_eq!(out, instances);
    }

    #[test]
    fn paraphrase_rate_one_swaps_every_synonym_token() {
        let inst = ProblemInstance {
            instance_id: "t".into(),
            question: "q".into(),
            gold_answer: None,
            paths: vec![ReasoningPath {
                path_id: "p".into(),
                steps: vec![ReasoningStep {
                    text: "step 3: derive thing from thing".into(),
                    confidence: 0.5,
                    answer: None,
                    raw_progress: None,
                }],
            }],
        };
        let out = perturb_paraphrase(&[inst], 1.0, 1).unwrap();
        let text = &out[0].paths[0].steps[0].text;
        // the three swappable tokens all swapped; "3:" untouched
        assert!(text.contains("stage"), "{text}");
        assert!(text.contains("obtain"), "{text}");
        assert!(text.contains("via"), "{text}");
        assert!(text.contains("3:"), "{text}");
    }

    #[test]
    fn paraphrase_preserves_numeric_tokens() {
        let config = SynthConfig {
            instances: 4,
            ..SynthConfig::default()
        };
        let instances = generate(&config).unwrap();
        for rate in [0.3, 0.7, 1.0] {
            let out = perturb_paraphrase(&instances, rate, 99).unwrap();
            for (a, b) in instances.iter().zip(&out) {
                for (pa, pb) in a.paths.iter().zip(&b.paths) {
                    for (sa, sb) in pa.steps.iter().zip(&pb.steps) {
                        assert_eq!(numeric_tokens(&sa.text), numeric_tokens(&sb.text));
                    }
                }
            }
        }
    }

    #[test]
    fn loop_requires_three_paths() {
        let config = SynthConfig {
            paths: 2,
            planted_loop: true,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&config), Err(Error::Config(_))));
    }

    #[test]
    fn confidence_model_separates_roles() {
        let config = SynthConfig::default();
        let instances = generate(&config).unwrap();
        for inst in &instances {
            for path in &inst.paths {
                for step in &path.steps {
                    let base = role_base(&path.path_id, &config);
                    assert!(
                        (step.confidence - base).abs() <= config.confidence_jitter + 1e-12,
                        "confidence {} strayed from base {base}",
                        step.confidence
                    );
                }
            }
        }
    }
}
