//! Run configuration: every tunable of the pipeline in one struct, loadable
//! from a flat key=value file with flag overrides on top (flags beat file
//! beats defaults).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MergePolicy, SimilarityMode};
use crate::homology::{SelectionMode, SelectionPolicy};
use crate::metric::MetricParams;
use crate::relation::RelationParams;
use crate::skeleton::SpliceParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    File,
    Remote,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    Rule,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub theta_merge: f64,
    pub similarity_mode: SimilarityMode,
    pub blend_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub k: usize,
    pub tau_percentile: f64,
    pub epsilon_lat: f64,
    pub chunk_size: usize,
    pub m_refute: f64,
    pub w_support: f64,
    pub delta_logic: f64,
    pub selection_mode: SelectionMode,
    pub top_k: usize,
    pub top_q: f64,
    pub delta_loop: f64,
    pub lambda: f64,
    pub budget_cap: u32,
    pub embed_mode: EmbedMode,
    pub relation_mode: RelationMode,
    pub embed_dimension: usize,
    pub embed_model: String,
    pub embed_file: Option<PathBuf>,
    pub embed_cache: Option<PathBuf>,
    pub relation_cache: Option<PathBuf>,
    pub persistence_vote_factor: bool,
    pub seed: u64,
    pub workers: usize,
    pub backbone_tag: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            theta_merge: 0.85,
            similarity_mode: SimilarityMode::CanonJaccard,
            blend_weight: 0.5,
            alpha: 0.6,
            beta: 0.3,
            nu: 0.1,
            k: 15,
            tau_percentile: 95.0,
            epsilon_lat: 0.1,
            chunk_size: 20,
            m_refute: 1000.0,
            w_support: 1.0,
            delta_logic: 1.0,
            selection_mode: SelectionMode::TopK,
            top_k: 5,
            top_q: 20.0,
            delta_loop: 0.15,
            lambda: 0.15,
            budget_cap: 19,
            embed_mode: EmbedMode::Fallback,
            relation_mode: RelationMode::Rule,
            embed_dimension: 64,
            embed_model: "default-embedding-model".into(),
            embed_file: None,
            embed_cache: None,
            relation_cache: None,
            persistence_vote_factor: true,
            seed: 0,
            workers: 1,
            backbone_tag: "offline".into(),
        }
    }
}

impl RunConfig {
    /// Applies one key=value assignment (file lines and flag overrides both
    /// funnel through here).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value for {what}: {value}"));
        match key {
            "theta_merge" => self.theta_merge = value.parse().map_err(|_| bad(key))?,
            "similarity_mode" => {
                self.similarity_mode = match value {
                    "canon_jaccard" => SimilarityMode::CanonJaccard,
                    "embedding_cosine" => SimilarityMode::EmbeddingCosine,
                    "blend" => SimilarityMode::Blend,
                    _ => return Err(bad(key)),
                }
            }
            "blend_weight" => self.blend_weight = value.parse().map_err(|_| bad(key))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad(key))?,
            "beta" => self.beta = value.parse().map_err(|_| bad(key))?,
            "nu" => self.nu = value.parse().map_err(|_| bad(key))?,
            "k" => self.k = value.parse().map_err(|_| bad(key))?,
            "tau_percentile" => self.tau_percentile = value.parse().map_err(|_| bad(key))?,
            "epsilon_lat" => self.epsilon_lat = value.parse().map_err(|_| bad(key))?,
            "chunk_size" => self.chunk_size = value.parse().map_err(|_| bad(key))?,
            "m_refute" => self.m_refute = value.parse().map_err(|_| bad(key))?,
            "w_support" => self.w_support = value.parse().map_err(|_| bad(key))?,
            "delta_logic" => self.delta_logic = value.parse().map_err(|_| bad(key))?,
            "selection_mode" => {
                self.selection_mode = match value {
                    "top_k" => SelectionMode::TopK,
                    "top_q_percent" => SelectionMode::TopQPercent,
                    _ => return Err(bad(key)),
                }
            }
            "top_k" => self.top_k = value.parse().map_err(|_| bad(key))?,
            "top_q" => self.top_q = value.parse().map_err(|_| bad(key))?,
            "delta_loop" => self.delta_loop = value.parse().map_err(|_| bad(key))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key))?,
            "budget_cap" => self.budget_cap = value.parse().map_err(|_| bad(key))?,
            "embed_mode" => {
                self.embed_mode = match value {
                    "file" => EmbedMode::File,
                    "remote" => EmbedMode::Remote,
                    "fallback" => EmbedMode::Fallback,
                    _ => return Err(bad(key)),
                }
            }
            "relation_mode" => {
                self.relation_mode = match value {
                    "rule" => RelationMode::Rule,
                    "remote" => RelationMode::Remote,
                    _ => return Err(bad(key)),
                }
            }
            "embed_dimension" => self.embed_dimension = value.parse().map_err(|_| bad(key))?,
            "embed_model" => self.embed_model = value.to_string(),
            "embed_file" => self.embed_file = Some(PathBuf::from(value)),
            "embed_cache" => self.embed_cache = Some(PathBuf::from(value)),
            "relation_cache" => self.relation_cache = Some(PathBuf::from(value)),
            "persistence_vote_factor" => {
                self.persistence_vote_factor = value.parse().map_err(|_| bad(key))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "workers" => self.workers = value.parse().map_err(|_| bad(key))?,
            "backbone_tag" => self.backbone_tag = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Loads `key=value` lines over the current values. '#' starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Three-layer precedence: defaults, then the optional file, then
    /// explicit overrides.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        for (key, value) in overrides {
            config.apply_kv(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.metric_params().validate()?;
        if !(0.0..=1.0).contains(&self.theta_merge) {
            return Err(Error::Config(format!(
                "theta_merge must be in [0,1], got {}",
                self.theta_merge
            )));
        }
        if !(0.1..=0.2).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0.1,0.2], got {}",
                self.lambda
            )));
        }
        if self.delta_loop <= 0.0 {
            return Err(Error::Config("delta_loop must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.embed_mode == EmbedMode::File && self.embed_file.is_none() {
            return Err(Error::Config("embed_mode=file requires embed_file".into()));
        }
        Ok(())
    }

    /// Every key in `apply_kv` form; re-feeding this output reproduces the
    /// configuration exactly.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("theta_merge", self.theta_merge.to_string());
        push(
            "similarity_mode",
            match self.similarity_mode {
                SimilarityMode::CanonJaccard => "canon_jaccard".into(),
                SimilarityMode::EmbeddingCosine => "embedding_cosine".into(),
                SimilarityMode::Blend => "blend".into(),
            },
        );
        push("blend_weight", self.blend_weight.to_string());
        push("alpha", self.alpha.to_string());
        push("beta", self.beta.to_string());
        push("nu", self.nu.to_string());
        push("k", self.k.to_string());
        push("tau_percentile", self.tau_percentile.to_string());
        push("epsilon_lat", self.epsilon_lat.to_string());
        push("chunk_size", self.chunk_size.to_string());
        push("m_refute", self.m_refute.to_string());
        push("w_support", self.w_support.to_string());
        push("delta_logic", self.delta_logic.to_string());
        push(
            "selection_mode",
            match self.selection_mode {
                SelectionMode::TopK => "top_k".into(),
                SelectionMode::TopQPercent => "top_q_percent".into(),
            },
        );
        push("top_k", self.top_k.to_string());
        push("top_q", self.top_q.to_string());
        push("delta_loop", self.delta_loop.to_string());
        push("lambda", self.lambda.to_string());
        push("budget_cap", self.budget_cap.to_string());
        push(
            "embed_mode",
            match self.embed_mode {
                EmbedMode::File => "file".into(),
                EmbedMode::Remote => "remote".into(),
                EmbedMode::Fallback => "fallback".into(),
            },
        );
        push(
            "relation_mode",
            match self.relation_mode {
                RelationMode::Rule => "rule".into(),
                RelationMode::Remote => "remote".into(),
            },
        );
        push("embed_dimension", self.embed_dimension.to_string());
        push("embed_model", self.embed_model.clone());
        if let Some(p) = &self.embed_file {
            push("embed_file", p.display().to_string());
        }
        if let Some(p) = &self.embed_cache {
            push("embed_cache", p.display().to_string());
        }
        if let Some(p) = &self.relation_cache {
            push("relation_cache", p.display().to_string());
        }
        push(
            "persistence_vote_factor",
            self.persistence_vote_factor.to_string(),
        );
        push("seed", self.seed.to_string());
        push("workers", self.workers.to_string());
        push("backbone_tag", self.backbone_tag.clone());
        out
    }

    pub fn merge_policy(&self) -> MergePolicy {
        MergePolicy {
            theta_merge: self.theta_merge,
            similarity_mode: self.similarity_mode,
            blend_weight: self.blend_weight,
        }
    }

    pub fn relation_params(&self) -> RelationParams {
        RelationParams {
            m: self.m_refute,
            w: self.w_support,
            chunk_size: self.chunk_size,
            delta_logic: self.delta_logic,
        }
    }

    pub fn metric_params(&self) -> MetricParams {
        MetricParams {
            alpha: self.alpha,
            beta: self.beta,
            nu: self.nu,
            k: self.k,
            tau_percentile: self.tau_percentile,
            relation: self.relation_params(),
        }
    }

    pub fn selection_policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            mode: self.selection_mode,
            k: self.top_k,
            q: self.top_q,
        }
    }

    pub fn splice_params(&self) -> SpliceParams {
        SpliceParams {
            delta_loop: self.delta_loop,
            lambda: self.lambda,
        }
    }
}
