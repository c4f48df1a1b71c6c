//! Scratch inspection of synthetic-corpus pipeline behavior across shapes.
//! Knobs come from env vars so shapes can be swept from the shell.

use topotrace::config::RunConfig;
use topotrace::pipeline::{process_instance, PipelineContext};
use topotrace::synth::{generate, SynthConfig};

fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let loop_on = envu("LOOP", 1) == 1;
    let synth_config = SynthConfig {
        instances: envu("INSTANCES", 1),
        backbone_len: envu("LEN", 16),
        distractor_len: envu("DLEN", 5),
        distractors: envu("DIST", 2),
        planted_loop: loop_on,
        noise: envf("NOISE", 0.0),
        distractor_confidence: envf("DCONF", 0.3),
        seed: envu("SEED", 0) as u64,
        ..SynthConfig::default()
    };
    let corpus = generate(&synth_config).unwrap();
    let mut config = RunConfig::default();
    config.k = envu("K", 15);
    config.tau_percentile = envf("TAU", 95.0);
    config.embed_dimension = envu("DIM", 64);
    config.epsilon_lat = envf("EPSLAT", 0.1);
    let ctx = PipelineContext::from_config(config).unwrap();

    for inst in &corpus {
        let outcome = process_instance(&ctx, inst).unwrap();
        let mut h1: Vec<(f64, f64, f64)> = outcome
            .diagram
            .pairs
            .iter()
            .filter(|p| p.dimension == 1 && p.lifespan() > 0.0)
            .map(|p| {
                (
                    p.capped_lifespan(outcome.diagram.tau_value),
                    p.birth,
                    p.death.unwrap_or(f64::INFINITY),
                )
            })
            .collect();
        h1.sort_by(|a, b| b.0.total_cmp(&a.0));
        println!(
            "{} nodes={} winner={:?} correct={:?} fallback={} spliced={} top_h1={:.4}",
            inst.instance_id,
            outcome.graph.nodes.len(),
            outcome.report.winner,
            outcome.report.correct,
            outcome.report.used_fallback,
            outcome.skeletons.iter().any(|s| s.spliced),
            outcome.report.persistence.top_h1_lifespan,
        );
        for (lifespan, birth, death) in h1.iter().take(5) {
            println!("    h1 lifespan={lifespan:.4} birth={birth:.4} death={death:.4}");
        }
        if std::env::var("REPS").is_ok() {
            let mut pairs: Vec<&topotrace::homology::PersistencePair> = outcome
                .diagram
                .pairs
                .iter()
                .filter(|p| p.dimension == 1 && p.lifespan() > 0.0)
                .collect();
            pairs.sort_by(|a, b| {
                b.capped_lifespan(outcome.diagram.tau_value)
                    .total_cmp(&a.capped_lifespan(outcome.diagram.tau_value))
            });
            for p in pairs.iter().take(3) {
                let verts = p.representative_vertices();
                println!(
                    "    rep lifespan={:.4}: {:?}",
                    p.capped_lifespan(outcome.diagram.tau_value),
                    verts
                        .iter()
                        .map(|&v| {
                            let t = &outcome.graph.nodes[v as usize].text;
                            t[..t.len().min(28)].to_string()
                        })
                        .collect::<Vec<_>>()
                );
            }
        }
        if std::env::var("VERBOSE").is_ok() {
            println!("{}", serde_json::to_string_pretty(&outcome.report).unwrap());
        }
        if std::env::var("TALLY").is_ok() {
            for t in &outcome.tally.totals {
                println!("TALLY {} weight={:.4} conf={:.4}", t.answer, t.weight, t.confidence_total);
            }
            for (node, w) in &outcome.tally.node_weights {
                println!(
                    "  vote node={node} w={w:.4} deg_text= {}",
                    outcome.graph.nodes[*node as usize].text
                );
            }
        }
        if std::env::var("EDGE_DUMP").is_ok() {
            let space = {
                use topotrace::graph::build_graph;
                use topotrace::metric::{build_metric_space, compute_features};
                use topotrace::providers::Budget;
                use topotrace::relation::{build_candidate_pairs, label_all};
                let cfg = &ctx.config;
                let g = build_graph(inst, &cfg.merge_policy(), None).unwrap();
                let pairs = build_candidate_pairs(&g, cfg.epsilon_lat);
                let budget = Budget::new(cfg.budget_cap, false);
                let rels = label_all(
                    &g,
                    &pairs,
                    &cfg.relation_params(),
                    ctx.oracle.as_ref(),
                    &budget,
                    None,
                    None,
                )
                .unwrap();
                let feats = compute_features(&g, ctx.embedder.as_ref()).unwrap();
                (build_metric_space(&feats, &cfg.metric_params(), &rels).unwrap(), g)
            };
            let (ms, g) = space;
            for &(u, v, w) in &ms.graph.edges {
                println!(
                    "EDGE {u:>2} {v:>2} {w:.4} | {} | {}",
                    g.nodes[u as usize].text, g.nodes[v as usize].text
                );
            }
        }
    }
}
