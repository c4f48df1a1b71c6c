//! End-to-end per-instance pipeline and the batch runner.
//!
//! Stage order per instance: merge the hypothesis graph, label candidate
//! relations, embed and assemble the metric space, run persistence, map
//! selected features back to clusters/loops/skeletons, vote, verify.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::aggregate::{
    aggregate_answers, verify_with_loop, VerificationFlags, VoteParams, VoteTally,
};
use crate::config::{EmbedMode, RelationMode, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{build_graph, EdgeKind, HypothesisGraph, NodeId};
use crate::homology::{
    build_filtration, compute_persistence, operating_scales, select_features, PersistenceDiagram,
};
use crate::metric::{build_metric_space, compute_features, MetricSpace};
use crate::providers::{
    Budget, CachedEmbedder, Embedder, FallbackEmbedder, FileEmbedder, RelationOracle,
    RemoteEmbedder, RemoteRelationOracle, RuleOracle,
};
use crate::relation::{build_candidate_pairs, label_all, RelationCache, RelationCode};
use crate::skeleton::{
    assign_loops, build_skeleton, cycle_tour, extract_clusters, localize_selected_loops,
    rank_clusters, threshold_graph, Skeleton,
};
use crate::trace::ProblemInstance;

/// Providers and configuration shared across a batch.
pub struct PipelineContext {
    pub config: RunConfig,
    pub embedder: Box<dyn Embedder>,
    pub oracle: Box<dyn RelationOracle>,
    relation_cache: Option<Mutex<RelationCache>>,
}

impl PipelineContext {
    /// Builds providers according to the config (remote modes read their
    /// endpoints from the environment).
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let base: Box<dyn Embedder> = match config.embed_mode {
            EmbedMode::Fallback => Box::new(FallbackEmbedder {
                dimension: config.embed_dimension,
            }),
            EmbedMode::File => {
                let path = config.embed_file.as_ref().expect("validated");
                Box::new(FileEmbedder::load(path)?)
            }
            EmbedMode::Remote => Box::new(RemoteEmbedder::from_env(
                &config.embed_model,
                config.embed_dimension,
            )?),
        };
        let embedder: Box<dyn Embedder> = match &config.embed_cache {
            Some(path) => Box::new(CachedEmbedder::open(base, path.clone())?),
            None => base,
        };
        let oracle: Box<dyn RelationOracle> = match config.relation_mode {
            RelationMode::Rule => Box::new(RuleOracle),
            RelationMode::Remote => Box::new(RemoteRelationOracle::from_env()?),
        };
        let relation_cache = match &config.relation_cache {
            Some(path) => Some(Mutex::new(RelationCache::load(path)?)),
            None => None,
        };
        Ok(PipelineContext {
            config,
            embedder,
            oracle,
            relation_cache,
        })
    }

    pub fn with_providers(
        config: RunConfig,
        embedder: Box<dyn Embedder>,
        oracle: Box<dyn RelationOracle>,
    ) -> Self {
        PipelineContext {
            config,
            embedder,
            oracle,
            relation_cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonDoc {
    pub cluster_index: usize,
    pub node_ids: Vec<NodeId>,
    pub node_texts: Vec<String>,
    pub spliced: bool,
    pub pivot: Option<NodeId>,
    pub contributing_paths: usize,
    pub avg_edge_weight: f64,
    pub loop_lifespan: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistenceSummary {
    /// Lifespan of the most persistent H1 feature (capped at the truncation
    /// horizon); 0 when no loop exists.
    pub top_h1_lifespan: f64,
    pub selected_h0: usize,
    pub selected_h1: usize,
    pub eps_h0: f64,
    pub h0_pairs: usize,
    pub h1_pairs: usize,
    pub tau_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_id: String,
    pub winner: Option<String>,
    pub gold_answer: Option<String>,
    pub correct: Option<bool>,
    pub margin: f64,
    pub used_fallback: bool,
    pub skeletons: Vec<SkeletonDoc>,
    pub persistence: PersistenceSummary,
    pub verification: Option<VerificationFlags>,
    pub budget_used: u32,
    pub relation_warnings: usize,
    pub warnings: Vec<String>,
}

/// Everything produced for one instance (report plus exportable artifacts).
pub struct InstanceOutcome {
    pub report: InstanceReport,
    pub graph: HypothesisGraph,
    pub diagram: PersistenceDiagram,
    pub skeletons: Vec<Skeleton>,
    pub tally: VoteTally,
}

pub fn process_instance(
    ctx: &PipelineContext,
    instance: &ProblemInstance,
) -> Result<InstanceOutcome> {
    let config = &ctx.config;
    let mut warnings: Vec<String> = Vec::new();

    // 1. merged hypothesis graph
    let policy = config.merge_policy();
    let embedder_for_merge = if policy.similarity_mode
        == crate::graph::SimilarityMode::CanonJaccard
    {
        None
    } else {
        Some(ctx.embedder.as_ref())
    };
    let mut graph = build_graph(instance, &policy, embedder_for_merge)?;

    // 2. candidate pairs and relation labels
    let budget = Budget::new(
        config.budget_cap,
        config.relation_mode == RelationMode::Remote,
    );
    let pair_set = build_candidate_pairs(&graph, config.epsilon_lat);
    let relation_params = config.relation_params();
    let relations = match &ctx.relation_cache {
        Some(cache) => {
            let mut guard = cache.lock().unwrap();
            label_all(
                &graph,
                &pair_set,
                &relation_params,
                ctx.oracle.as_ref(),
                &budget,
                Some(&mut guard),
                config.relation_cache.as_deref(),
            )?
        }
        None => label_all(
            &graph,
            &pair_set,
            &relation_params,
            ctx.oracle.as_ref(),
            &budget,
            None,
            None,
        )?,
    };

    // 3-4. features and metric space (structural features come from the
    // adjacency-only graph; relation edges are appended afterwards for
    // reporting)
    let features = compute_features(&graph, ctx.embedder.as_ref())?;
    let metric_params = config.metric_params();
    let space: MetricSpace = build_metric_space(&features, &metric_params, &relations)?;
    warnings.extend(space.warnings.iter().cloned());

    // 5. persistence
    let filtration = build_filtration(&space.graph);
    let mut diagram = compute_persistence(&filtration, space.graph.tau_value);
    diagram.params_hash = params_hash(config);

    // 6-7. selection and operating scales
    let selection = config.selection_policy();
    let (b0, b1) = select_features(&diagram, &selection);
    let scales = operating_scales(&diagram, &b0, &b1);
    if scales.used_tau_fallback {
        warnings.push("no finite H0 death among selected features; eps_h0 fell back to tau".into());
    }

    // 8. clusters at the H0 scale
    let sub_h0 = threshold_graph(&space.graph, scales.eps_h0);
    let clusters = extract_clusters(&sub_h0, &graph, &space.dist);

    // 9. loops localized at their per-loop scales and assigned to clusters
    let loops = localize_selected_loops(&diagram, &scales.eps_per_loop, &space.graph, &mut warnings);
    let (_assignments, principal_per_cluster) = assign_loops(&loops, &clusters);

    // 10. skeletons
    let progress: Vec<f64> = graph.nodes.iter().map(|n| n.progress).collect();
    let splice_params = config.splice_params();
    let mut skeletons: Vec<Skeleton> = Vec::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        let principal = principal_per_cluster[ci].map(|li| &loops[li]);
        let tour = principal.and_then(|lf| {
            let sub_b = threshold_graph(&space.graph, lf.eps);
            let rep = diagram.pairs[lf.pair_index].representative_vertices();
            cycle_tour(&lf.support, &sub_b, &rep, &progress)
        });
        if principal.is_some() && tour.is_none() {
            warnings.push(format!(
                "cluster {ci}: principal loop tour could not be closed; backbone kept unspliced"
            ));
        }
        match build_skeleton(
            cluster,
            ci,
            &sub_h0,
            principal,
            tour.as_deref(),
            &space.dist,
            &progress,
            &splice_params,
        ) {
            Some(sk) => skeletons.push(sk),
            None => warnings.push(format!("cluster {ci}: anchors disconnected, skipped")),
        }
    }
    let order = rank_clusters(&skeletons);
    let skeletons: Vec<Skeleton> = order.into_iter().map(|i| skeletons[i].clone()).collect();

    // 11. vote
    let degrees: Vec<usize> = (0..graph.nodes.len())
        .map(|v| sub_h0.degree(v as NodeId))
        .collect();
    let path_lengths: HashMap<String, usize> = instance
        .paths
        .iter()
        .map(|p| (p.path_id.clone(), p.steps.len()))
        .collect();
    let vote_params = VoteParams {
        persistence_factor: config.persistence_vote_factor,
    };
    let tally = aggregate_answers(&skeletons, &graph, &degrees, &path_lengths, &vote_params);

    // 12. verification along spliced tours (advisory)
    let verification = if skeletons.iter().any(|s| s.spliced) {
        Some(verify_with_loop(
            &tally,
            &skeletons,
            &graph,
            ctx.oracle.as_ref(),
            &budget,
        ))
    } else {
        None
    };

    // relation edges appended for the exported graph document
    for label in relations.labels() {
        let kind = match label.code {
            RelationCode::Support => EdgeKind::Support,
            RelationCode::Refute => EdgeKind::Refute,
            RelationCode::Neutral => continue,
        };
        graph.add_relation_edge(label.pair.0, label.pair.1, kind);
    }

    let top_h1_lifespan = top_h1_lifespan(&diagram);
    let correct = match (&tally.winner, &instance.gold_answer) {
        (Some(w), Some(g)) => Some(w == &crate::aggregate::normalize_answer(g)),
        _ => None,
    };
    let report = InstanceReport {
        instance_id: instance.instance_id.clone(),
        winner: tally.winner.clone(),
        gold_answer: instance.gold_answer.clone(),
        correct,
        margin: tally.margin,
        used_fallback: tally.used_fallback,
        skeletons: skeletons
            .iter()
            .map(|sk| SkeletonDoc {
                cluster_index: sk.cluster_index,
                node_ids: sk.path.clone(),
                node_texts: sk
                    .path
                    .iter()
                    .map(|&v| graph.nodes[v as usize].text.clone())
                    .collect(),
                spliced: sk.spliced,
                pivot: sk.pivot,
                contributing_paths: sk.covered_paths.len(),
                avg_edge_weight: sk.avg_edge_weight,
                loop_lifespan: sk.loop_lifespan_capped,
            })
            .collect(),
        persistence: PersistenceSummary {
            top_h1_lifespan,
            selected_h0: b0.len(),
            selected_h1: b1.len(),
            eps_h0: scales.eps_h0,
            h0_pairs: diagram.pairs_in_dim(0).count(),
            h1_pairs: diagram.pairs_in_dim(1).count(),
            tau_value: diagram.tau_value,
        },
        verification,
        budget_used: budget.used(),
        relation_warnings: relations.warnings,
        warnings,
    };

    Ok(InstanceOutcome {
        report,
        graph,
        diagram,
        skeletons,
        tally,
    })
}

/// Most persistent H1 lifespan, capped at the truncation horizon; 0 without
/// any positive-lifespan loop.
pub fn top_h1_lifespan(diagram: &PersistenceDiagram) -> f64 {
    diagram
        .pairs_in_dim(1)
        .map(|p| p.capped_lifespan(diagram.tau_value))
        .fold(0.0, f64::max)
}

fn params_hash(config: &RunConfig) -> String {
    crate::canon::canon_hash(&config.dump())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub instance_id: String,
    pub winner: Option<String>,
    pub gold: Option<String>,
    pub correct: Option<bool>,
    pub top_h1_lifespan: f64,
}

pub struct BatchResult {
    pub outcomes: Vec<InstanceOutcome>,
    /// (instance_id, error message) for instances that failed; the batch
    /// continues past them.
    pub errors: Vec<(String, String)>,
}

impl BatchResult {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.outcomes
            .iter()
            .map(|o| SummaryRow {
                instance_id: o.report.instance_id.clone(),
                winner: o.report.winner.clone(),
                gold: o.report.gold_answer.clone(),
                correct: o.report.correct,
                top_h1_lifespan: o.report.persistence.top_h1_lifespan,
            })
            .collect()
    }
}

/// Runs every instance through the pipeline on a pool of `workers` threads.
/// Output order is by instance_id regardless of completion order.
pub fn run_batch(ctx: &PipelineContext, instances: &[ProblemInstance]) -> BatchResult {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[a].instance_id.cmp(&instances[b].instance_id));

    let workers = ctx.config.workers.max(1).min(order.len().max(1));
    let results: Vec<Mutex<Option<Result<InstanceOutcome>>>> =
        (0..order.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= order.len() {
                    break;
                }
                let outcome = process_instance(ctx, &instances[order[slot]]);
                *results[slot].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut outcomes = Vec::new();
    let mut errors = Vec::new();
    for (slot, cell) in results.into_iter().enumerate() {
        let outcome = cell
            .into_inner()
            .unwrap()
            .expect("worker pool processed every slot");
        match outcome {
            Ok(o) => outcomes.push(o),
            Err(e) => errors.push((
                instances[order[slot]].instance_id.clone(),
                e.to_string(),
            )),
        }
    }
    BatchResult { outcomes, errors }
}

/// Serializes summary rows as the batch CSV
/// (instance_id, winner, gold, correct, top_h1_lifespan).
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["instance_id", "winner", "gold", "correct", "top_h1_lifespan"])?;
    for row in rows {
        writer.write_record([
            row.instance_id.as_str(),
            row.winner.as_deref().unwrap_or(""),
            row.gold.as_deref().unwrap_or(""),
            &row.correct.map(|c| c.to_string()).unwrap_or_default(),
            &row.top_h1_lifespan.to_string(),
        ])?;
    }
    String::from_utf8(writer.into_inner().map_err(|e| Error::Provider(e.to_string()))?)
        .map_err(|e| Error::Provider(e.to_string()))
}

/// Parses the batch summary CSV back into labeled samples for the stats
/// module. The dataset tag is the instance_id prefix before the first ':'
/// (or "all" when absent).
pub fn samples_from_summary_csv(text: &str) -> Result<Vec<crate::stats::LabeledSample>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let instance_id = record.get(0).unwrap_or("");
        let correct = match record.get(3) {
            Some("true") => true,
            Some("false") => false,
            _ => continue, // no gold answer: excluded from validation stats
        };
        let persistence: f64 = record
            .get(4)
            .unwrap_or("0")
            .parse()
            .map_err(|_| Error::Config(format!("bad top_h1_lifespan for {instance_id}")))?;
        let dataset_tag = instance_id
            .split_once(':')
            .map(|(tag, _)| tag.to_string())
            .unwrap_or_else(|| "all".to_string());
        out.push(crate::stats::LabeledSample {
            persistence,
            correct,
            dataset_tag,
        });
    }
    Ok(out)
}
