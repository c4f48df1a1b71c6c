//! Validation statistics for the persistence→correctness link: Spearman
//! correlation, single-feature logistic regression, ROC-AUC, binned accuracy
//! curves, and the perturbation-stability experiment.

use serde::{Deserialize, Serialize};

use crate::bottleneck::bottleneck_distance;
use crate::error::{Error, Result};
use crate::homology::{
    build_filtration, compute_persistence, select_features, SelectionPolicy,
};
use crate::metric::{build_metric_space, MetricParams, NodeFeatures};
use crate::relation::RelationTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Top H1 lifespan of the instance; 0 when no loop was found.
    pub persistence: f64,
    pub correct: bool,
    pub dataset_tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Slope on z-scored persistence.
    pub coefficient: f64,
    pub intercept: f64,
    pub odds_ratio: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinRow {
    pub center: f64,
    /// `None` for empty bins.
    pub mean_accuracy: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub backbone_tag: String,
    pub n: usize,
    pub spearman_rho: f64,
    pub logistic: LogisticFit,
    pub auc: f64,
    pub per_dataset_auc: Vec<(String, f64)>,
    pub bins: Vec<BinRow>,
    pub box_correct: Option<BoxStats>,
    pub box_incorrect: Option<BoxStats>,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0; // 1-based average rank
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "correlation undefined on constant input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Tie-corrected Spearman: Pearson on average ranks.
pub fn spearman(samples: &[LabeledSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Degenerate("need at least two samples".into()));
    }
    let x: Vec<f64> = samples.iter().map(|s| s.persistence).collect();
    let y: Vec<f64> = samples.iter().map(|s| if s.correct { 1.0 } else { 0.0 }).collect();
    pearson(&average_ranks(&x), &average_ranks(&y))
}

/// Intercept + slope logistic fit on z-scored persistence, by
/// Newton/IRLS. Separable data stops at the iteration cap with
/// `converged: false`.
pub fn logistic_fit_1d(samples: &[LabeledSample]) -> Result<LogisticFit> {
    let n = samples.len();
    let pos = samples.iter().filter(|s| s.correct).count();
    if pos == 0 || pos == n {
        return Err(Error::Degenerate(format!(
            "logistic fit needs both classes, got only {}",
            if pos == 0 { "incorrect" } else { "correct" }
        )));
    }
    let raw: Vec<f64> = samples.iter().map(|s| s.persistence).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate(
            "logistic fit undefined on constant persistence".into(),
        ));
    }
    let x: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
    let y: Vec<f64> = samples.iter().map(|s| if s.correct { 1.0 } else { 0.0 }).collect();

    let mut b0 = 0.0f64;
    let mut b1 = 0.0f64;
    let mut converged = false;
    const CAP: usize = 100;
    const TOL: f64 = 1e-8;
    for _ in 0..CAP {
        // gradient and Hessian of the log-likelihood
        let mut g0 = 0.0;
        let mut g1 = 0.0;
        let mut h00 = 0.0;
        let mut h01 = 0.0;
        let mut h11 = 0.0;
        for (xi, yi) in x.iter().zip(&y) {
            let eta = b0 + b1 * xi;
            let p = 1.0 / (1.0 + (-eta).exp());
            let w = p * (1.0 - p);
            g0 += yi - p;
            g1 += (yi - p) * xi;
            h00 += w;
            h01 += w * xi;
            h11 += w * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        if det.abs() < 1e-300 {
            break; // flat Hessian: separation has pushed weights to zero
        }
        let d0 = (h11 * g0 - h01 * g1) / det;
        let d1 = (h00 * g1 - h01 * g0) / det;
        b0 += d0;
        b1 += d1;
        if d0.abs().max(d1.abs()) < TOL {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        coefficient: b1,
        intercept: b0,
        odds_ratio: b1.exp(),
        converged,
    })
}

/// Mann–Whitney AUC: over all (positive, negative) pairs, wins count 1 and
/// ties 0.5, evaluated in exact integer arithmetic before one division.
pub fn roc_auc(samples: &[LabeledSample]) -> Result<f64> {
    let pos: Vec<f64> = samples
        .iter()
        .filter(|s| s.correct)
        .map(|s| s.persistence)
        .collect();
    let neg: Vec<f64> = samples
        .iter()
        .filter(|s| !s.correct)
        .map(|s| s.persistence)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate("roc_auc needs both classes".into()));
    }
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1;
            } else if p == q {
                ties += 1;
            }
        }
    }
    let total = (pos.len() as u64) * (neg.len() as u64);
    Ok((2 * wins + ties) as f64 / (2 * total) as f64)
}

/// ROC curve points (fpr, tpr, threshold) sweeping thresholds from high to
/// low, one point per distinct score plus the (0,0) origin.
pub fn roc_points(samples: &[LabeledSample]) -> Vec<(f64, f64, f64)> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.persistence).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let pos = samples.iter().filter(|s| s.correct).count() as f64;
    let neg = samples.len() as f64 - pos;
    let mut out = vec![(0.0, 0.0, f64::INFINITY)];
    for &t in &scores {
        let tp = samples.iter().filter(|s| s.correct && s.persistence >= t).count() as f64;
        let fp = samples.iter().filter(|s| !s.correct && s.persistence >= t).count() as f64;
        out.push((
            if neg > 0.0 { fp / neg } else { 0.0 },
            if pos > 0.0 { tp / pos } else { 0.0 },
            t,
        ));
    }
    out
}

/// Trapezoidal area under the empirical ROC curve; agrees with `roc_auc`.
pub fn roc_auc_trapezoid(samples: &[LabeledSample]) -> Result<f64> {
    let pos = samples.iter().filter(|s| s.correct).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Degenerate("roc_auc needs both classes".into()));
    }
    let pts = roc_points(samples);
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (x0, y0, _) = w[0];
        let (x1, y1, _) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

/// Equal-width bins over the observed persistence range. The max value goes
/// into the last bin; empty bins are emitted with count 0.
pub fn bin_curve(samples: &[LabeledSample], n_bins: usize) -> Vec<BinRow> {
    assert!(n_bins >= 2, "need at least two bins");
    if samples.is_empty() {
        return (0..n_bins)
            .map(|i| BinRow {
                center: i as f64 + 0.5,
                mean_accuracy: None,
                count: 0,
            })
            .collect();
    }
    let lo = samples.iter().map(|s| s.persistence).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.persistence).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    for s in samples {
        let idx = if width == 0.0 {
            0
        } else {
            (((s.persistence - lo) / width) as usize).min(n_bins - 1)
        };
        counts[idx] += 1;
        if s.correct {
            hits[idx] += 1;
        }
    }
    (0..n_bins)
        .map(|i| BinRow {
            center: lo + width * (i as f64 + 0.5),
            mean_accuracy: if counts[i] > 0 {
                Some(hits[i] as f64 / counts[i] as f64)
            } else {
                None
            },
            count: counts[i],
        })
        .collect()
}

/// Five-number summary with linearly interpolated quartiles.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            sorted[lo]
        } else {
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    };
    Some(BoxStats {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: *sorted.last().unwrap(),
        count: sorted.len(),
    })
}

/// Full validation report over a labeled sample set.
pub fn stats_report(samples: &[LabeledSample], backbone_tag: &str, n_bins: usize) -> Result<StatsReport> {
    let mut tags: Vec<String> = samples.iter().map(|s| s.dataset_tag.clone()).collect();
    tags.sort();
    tags.dedup();
    let mut per_dataset_auc = Vec::new();
    for tag in &tags {
        let subset: Vec<LabeledSample> = samples
            .iter()
            .filter(|s| &s.dataset_tag == tag)
            .cloned()
            .collect();
        if let Ok(auc) = roc_auc(&subset) {
            per_dataset_auc.push((tag.clone(), auc));
        }
    }
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
    Ok(StatsReport {
        backbone_tag: backbone_tag.to_string(),
        n: samples.len(),
        spearman_rho: spearman(samples)?,
        logistic: logistic_fit_1d(samples)?,
        auc: roc_auc(samples)?,
        per_dataset_auc,
        bins: bin_curve(samples, n_bins),
        box_correct: box_stats(&correct),
        box_incorrect: box_stats(&incorrect),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbReport {
    pub sigma: f64,
    pub trials: usize,
    /// Per-trial H1 bottleneck distance to the unperturbed diagram.
    pub distances: Vec<f64>,
    pub max_distance: f64,
    /// Smallest lifespan among the baseline's selected H1 features, if any.
    pub min_selected_h1_lifespan: Option<f64>,
    /// max_distance < min selected lifespan; `None` without selected loops.
    pub stable: Option<bool>,
}

/// Gaussian embedding-noise stability probe: perturbs every semantic vector
/// with N(0, sigma^2) per coordinate, re-normalizes, rebuilds the metric and
/// diagrams, and reports H1 bottleneck distances to the baseline.
pub fn perturb_and_compare(
    features: &[NodeFeatures],
    params: &MetricParams,
    relations: &RelationTable,
    policy: &SelectionPolicy,
    sigma: f64,
    seed: u64,
    trials: usize,
) -> Result<PerturbReport> {
    use rand::SeedableRng;
    let baseline_space = build_metric_space(features, params, relations)?;
    let baseline =
        compute_persistence(&build_filtration(&baseline_space.graph), baseline_space.graph.tau_value);
    let (_, b1) = select_features(&baseline, policy);
    let min_selected = b1
        .iter()
        .map(|&i| baseline.pairs[i].lifespan())
        .fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.min(x)))
        });

    let mut distances = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            seed ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let mut perturbed = features.to_vec();
        if sigma > 0.0 {
            for f in &mut perturbed {
                for x in &mut f.semantic {
                    *x += gaussian(&mut rng) * sigma;
                }
                let norm: f64 = f.semantic.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut f.semantic {
                        *x /= norm;
                    }
                }
            }
        }
        let space = build_metric_space(&perturbed, params, relations)?;
        let dgm = compute_persistence(&build_filtration(&space.graph), space.graph.tau_value);
        distances.push(bottleneck_distance(&baseline, &dgm, 1));
    }
    let max_distance = distances.iter().copied().fold(0.0, f64::max);
    Ok(PerturbReport {
        sigma,
        trials,
        max_distance,
        stable: min_selected.map(|m| max_distance < m),
        min_selected_h1_lifespan: min_selected,
        distances,
    })
}

/// Box–Muller standard normal.
fn gaussian<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
