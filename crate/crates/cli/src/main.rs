//! Batch command-line surface for the trace-topology pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use topotrace::config::RunConfig;
use topotrace::metric::compute_features;
use topotrace::pipeline::{
    run_batch, samples_from_summary_csv, summary_csv, PipelineContext,
};
use topotrace::stats::{bin_curve, box_stats, perturb_and_compare, roc_points, stats_report};
use topotrace::synth::{self, SynthConfig};
use topotrace::trace::{parse_trace_file, to_jsonl, ProblemInstance};

#[derive(Parser)]
#[command(name = "topotrace", version, about = "Merge reasoning traces into a hypothesis graph, analyze it with persistent homology, and extract answer-bearing skeletons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration surface shared by pipeline subcommands. Flag overrides beat
/// the config file, which beats built-in defaults.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// KNN neighbor count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "theta-merge")]
    theta_merge: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// Top-K persistent features per dimension.
    #[arg(long = "K")]
    top_k: Option<usize>,
    #[arg(long = "delta-loop")]
    delta_loop: Option<f64>,
    /// Relation oracle call cap.
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long = "embed-mode", value_parser = ["file", "remote", "fallback"])]
    embed_mode: Option<String>,
    #[arg(long = "relation-mode", value_parser = ["rule", "remote"])]
    relation_mode: Option<String>,
    #[arg(long = "embed-file", value_name = "PATH")]
    embed_file: Option<PathBuf>,
    #[arg(long = "embed-cache", value_name = "PATH")]
    embed_cache: Option<PathBuf>,
    #[arg(long = "relation-cache", value_name = "PATH")]
    relation_cache: Option<PathBuf>,
    #[arg(long = "tau-percentile")]
    tau_percentile: Option<f64>,
    #[arg(long = "backbone-tag")]
    backbone_tag: Option<String>,
    /// Print the fully resolved configuration and exit.
    #[arg(long = "dump-config")]
    dump_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("theta_merge", self.theta_merge.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("nu", self.nu.map(|v| v.to_string()));
        put("top_k", self.top_k.map(|v| v.to_string()));
        put("delta_loop", self.delta_loop.map(|v| v.to_string()));
        put("budget_cap", self.budget.map(|v| v.to_string()));
        put("embed_mode", self.embed_mode.clone());
        put("relation_mode", self.relation_mode.clone());
        put(
            "embed_file",
            self.embed_file.as_ref().map(|p| p.display().to_string()),
        );
        put(
            "embed_cache",
            self.embed_cache.as_ref().map(|p| p.display().to_string()),
        );
        put(
            "relation_cache",
            self.relation_cache.as_ref().map(|p| p.display().to_string()),
        );
        put("tau_percentile", self.tau_percentile.map(|v| v.to_string()));
        put("backbone_tag", self.backbone_tag.clone());
        let config = RunConfig::resolve(self.config.as_deref(), &overrides)?;
        Ok(config)
    }

    /// Resolves, honoring --dump-config (print and signal exit).
    fn resolve_or_dump(&self) -> Result<Option<RunConfig>> {
        let config = self.resolve()?;
        if self.dump_config {
            print!("{}", config.dump());
            return Ok(None);
        }
        Ok(Some(config))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline over a trace file: per-instance reports + batch summary.
    Run {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Parse and validate a trace file.
    IngestValidate {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
    },
    /// Build and export merged hypothesis graphs (one JSON per instance).
    BuildGraph {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export persistence diagrams as CSV (dimension, birth, death, lifespan).
    Persistence {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export skeleton reports (one JSON per instance).
    Skeleton {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print each instance's winning answer.
    Answer {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Validation statistics over a batch summary CSV.
    Stats {
        /// Summary CSV produced by `run`.
        #[arg(long, value_name = "PATH")]
        summary: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Embedding-noise stability experiment.
    Perturb {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Noise magnitude (norm of the expected perturbation).
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic trace corpus, or paraphrase an existing one.
    Synth {
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        paths: usize,
        #[arg(long = "backbone-len", default_value_t = 16)]
        backbone_len: usize,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long = "planted-loop", default_value_t = true)]
        planted_loop: bool,
        #[arg(long, default_value = "42")]
        answer: String,
        #[arg(long = "distractor-confidence", default_value_t = 0.3)]
        distractor_confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Paraphrase this trace file instead of generating.
        #[arg(long, value_name = "PATH")]
        paraphrase: Option<PathBuf>,
        /// Token-swap rate for --paraphrase.
        #[arg(long, default_value_t = 0.3)]
        rate: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn load_traces(path: &Path) -> Result<Vec<ProblemInstance>> {
    parse_trace_file(path).with_context(|| format!("reading traces from {}", path.display()))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { traces, out, config } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config)?;
            let batch = run_batch(&ctx, &instances);
            std::fs::create_dir_all(out.join("reports"))?;
            for outcome in &batch.outcomes {
                let path = out
                    .join("reports")
                    .join(format!("{}.json", safe_name(&outcome.report.instance_id)));
                write_file(&path, &serde_json::to_string_pretty(&outcome.report)?)?;
            }
            write_file(
                &out.join("summary.csv"),
                &summary_csv(&batch.summary_rows())?,
            )?;
            for (id, msg) in &batch.errors {
                eprintln!("instance {id} failed: {msg}");
            }
            println!(
                "processed {} instances ({} failed); summary at {}",
                batch.outcomes.len(),
                batch.errors.len(),
                out.join("summary.csv").display()
            );
            Ok(if batch.errors.is_empty() { 0 } else { 2 })
        }
        Command::IngestValidate { traces } => {
            let instances = load_traces(&traces)?;
            let paths: usize = instances.iter().map(|i| i.paths.len()).sum();
            let steps: usize = instances
                .iter()
                .flat_map(|i| i.paths.iter())
                .map(|p| p.steps.len())
                .sum();
            println!(
                "{} instances, {} paths, {} steps: all valid",
                instances.len(),
                paths,
                steps
            );
            Ok(0)
        }
        Command::BuildGraph { traces, out, config } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config)?;
            let batch = run_batch(&ctx, &instances);
            std::fs::create_dir_all(&out)?;
            for outcome in &batch.outcomes {
                let path = out.join(format!("{}.graph.json", safe_name(&outcome.graph.instance_id)));
                write_file(&path, &serde_json::to_string_pretty(&outcome.graph)?)?;
            }
            report_errors(&batch.errors);
            Ok(if batch.errors.is_empty() { 0 } else { 2 })
        }
        Command::Persistence { traces, out, config } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config)?;
            let batch = run_batch(&ctx, &instances);
            std::fs::create_dir_all(&out)?;
            for outcome in &batch.outcomes {
                let mut csv_text = String::from("dimension,birth,death,lifespan\n");
                for p in &outcome.diagram.pairs {
                    let death = p
                        .death
                        .map(|d| d.to_string())
                        .unwrap_or_else(|| "inf".into());
                    let lifespan = if p.death.is_some() {
                        p.lifespan().to_string()
                    } else {
                        "inf".into()
                    };
                    csv_text.push_str(&format!(
                        "{},{},{},{}\n",
                        p.dimension, p.birth, death, lifespan
                    ));
                }
                let path = out.join(format!(
                    "{}.diagram.csv",
                    safe_name(&outcome.report.instance_id)
                ));
                write_file(&path, &csv_text)?;
            }
            report_errors(&batch.errors);
            Ok(if batch.errors.is_empty() { 0 } else { 2 })
        }
        Command::Skeleton { traces, out, config } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config)?;
            let batch = run_batch(&ctx, &instances);
            std::fs::create_dir_all(&out)?;
            for outcome in &batch.outcomes {
                let path = out.join(format!(
                    "{}.skeleton.json",
                    safe_name(&outcome.report.instance_id)
                ));
                write_file(
                    &path,
                    &serde_json::to_string_pretty(&outcome.report.skeletons)?,
                )?;
            }
            report_errors(&batch.errors);
            Ok(if batch.errors.is_empty() { 0 } else { 2 })
        }
        Command::Answer { traces, config } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config)?;
            let batch = run_batch(&ctx, &instances);
            for outcome in &batch.outcomes {
                println!(
                    "{}\t{}",
                    outcome.report.instance_id,
                    outcome.report.winner.as_deref().unwrap_or("<no-answer>")
                );
            }
            report_errors(&batch.errors);
            Ok(if batch.errors.is_empty() { 0 } else { 2 })
        }
        Command::Stats {
            summary,
            out,
            bins,
            config,
        } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let text = std::fs::read_to_string(&summary)
                .with_context(|| format!("reading {}", summary.display()))?;
            let samples = samples_from_summary_csv(&text)?;
            if samples.is_empty() {
                bail!("summary contains no labeled samples");
            }
            let report = stats_report(&samples, &config.backbone_tag, bins)?;
            std::fs::create_dir_all(&out)?;
            write_file(
                &out.join("stats.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;

            let mut roc = String::from("fpr,tpr,threshold\n");
            for (fpr, tpr, threshold) in roc_points(&samples) {
                roc.push_str(&format!("{fpr},{tpr},{threshold}\n"));
            }
            write_file(&out.join("roc_points.csv"), &roc)?;

            let mut bins_csv = String::from("center,mean_accuracy,count\n");
            for row in bin_curve(&samples, bins) {
                bins_csv.push_str(&format!(
                    "{},{},{}\n",
                    row.center,
                    row.mean_accuracy.map(|m| m.to_string()).unwrap_or_default(),
                    row.count
                ));
            }
            write_file(&out.join("bins.csv"), &bins_csv)?;

            let mut boxes = String::from("outcome,min,q1,median,q3,max,count\n");
            let correct: Vec<f64> = samples
                .iter()
                .filter(|s| s.correct)
                .map(|s| s.persistence)
                .collect();
            let incorrect: Vec<f64> = samples
                .iter()
                .filter(|s| !s.correct)
                .map(|s| s.persistence)
                .collect();
            for (name, values) in [("correct", correct), ("incorrect", incorrect)] {
                if let Some(b) = box_stats(&values) {
                    boxes.push_str(&format!(
                        "{name},{},{},{},{},{},{}\n",
                        b.min, b.q1, b.median, b.q3, b.max, b.count
                    ));
                }
            }
            write_file(&out.join("box.csv"), &boxes)?;
            println!(
                "rho={:.4} auc={:.4} or={:.4} over {} samples",
                report.spearman_rho, report.auc, report.logistic.odds_ratio, report.n
            );
            Ok(0)
        }
        Command::Perturb {
            traces,
            out,
            sigma,
            trials,
            config,
        } => {
            let Some(config) = config.resolve_or_dump()? else {
                return Ok(0);
            };
            let instances = load_traces(&traces)?;
            let ctx = PipelineContext::from_config(config.clone())?;
            std::fs::create_dir_all(&out)?;
            let mut failures = 0;
            for inst in &instances {
                let graph = topotrace::graph::build_graph(
                    inst,
                    &config.merge_policy(),
                    None,
                )?;
                let pair_set =
                    topotrace::relation::build_candidate_pairs(&graph, config.epsilon_lat);
                let budget = topotrace::providers::Budget::new(config.budget_cap, false);
                let relations = topotrace::relation::label_all(
                    &graph,
                    &pair_set,
                    &config.relation_params(),
                    ctx.oracle.as_ref(),
                    &budget,
                    None,
                    None,
                )?;
                let features = compute_features(&graph, ctx.embedder.as_ref())?;
                match perturb_and_compare(
                    &features,
                    &config.metric_params(),
                    &relations,
                    &config.selection_policy(),
                    sigma,
                    config.seed,
                    trials,
                ) {
                    Ok(report) => {
                        let path = out.join(format!(
                            "{}.perturb.json",
                            safe_name(&inst.instance_id)
                        ));
                        write_file(&path, &serde_json::to_string_pretty(&report)?)?;
                    }
                    Err(e) => {
                        eprintln!("instance {} failed: {e}", inst.instance_id);
                        failures += 1;
                    }
                }
            }
            Ok(if failures == 0 { 0 } else { 2 })
        }
        Command::Synth {
            out,
            instances,
            paths,
            backbone_len,
            distractors,
            noise,
            planted_loop,
            answer,
            distractor_confidence,
            seed,
            paraphrase,
            rate,
        } => {
            if let Some(input) = paraphrase {
                let original = load_traces(&input)?;
                let rewritten = synth::perturb_paraphrase(&original, rate, seed)?;
                write_file(&out, &to_jsonl(&rewritten)?)?;
                println!(
                    "paraphrased {} instances at rate {rate} -> {}",
                    rewritten.len(),
                    out.display()
                );
                return Ok(0);
            }
            let config = SynthConfig {
                seed,
                instances,
                paths,
                backbone_len,
                distractors,
                noise,
                planted_loop,
                answer,
                distractor_confidence,
                ..SynthConfig::default()
            };
            let corpus = synth::generate(&config)?;
            write_file(&out, &to_jsonl(&corpus)?)?;
            println!("generated {} instances -> {}", corpus.len(), out.display());
            Ok(0)
        }
    }
}

fn report_errors(errors: &[(String, String)]) {
    for (id, msg) in errors {
        eprintln!("instance {id} failed: {msg}");
    }
}

/// Filesystem-safe instance id.
fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
