use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::bce_loss;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(f64::from(y)));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form with mid-ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean clamped binary cross-entropy.
pub fn mean_logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        total += bce_loss(f64::from(y), p)?;
    }
    Ok(total / scores.len() as f64)
}

/// Test metrics of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub slug: String,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub n_test: usize,
    pub dataset_hash: String,
    pub config_hash: String,
    pub runtime_secs: f64,
}

impl MetricsReport {
    /// Same variant, seed and metric values, bit for bit; runtime is ignored.
    pub fn same_metrics(&self, other: &MetricsReport) -> bool {
        self.slug == other.slug
            && self.seed == other.seed
            && self.auc.to_bits() == other.auc.to_bits()
            && self.logloss.to_bits() == other.logloss.to_bits()
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub slug: String,
    pub seeds: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-variant summaries in order of first appearance.
pub fn summarize(reports: &[MetricsReport]) -> Vec<VariantSummary> {
    let mut slugs: Vec<&str> = Vec::new();
    for r in reports {
        if !slugs.contains(&r.slug.as_str()) {
            slugs.push(&r.slug);
        }
    }
    slugs
        .into_iter()
        .map(|slug| {
            let mine: Vec<&MetricsReport> = reports.iter().filter(|r| r.slug == slug).collect();
            let aucs: Vec<f64> = mine.iter().map(|r| r.auc).collect();
            let lls: Vec<f64> = mine.iter().map(|r| r.logloss).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (logloss_mean, logloss_std) = mean_std(&lls);
            VariantSummary {
                variant: mine[0].variant.clone(),
                slug: slug.to_string(),
                seeds: mine.len(),
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
            }
        })
        .collect()
}

/// Tab-separated table, one row per variant and seed.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("variant\tseed\tauc\tlogloss\tn_test\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\n",
            r.variant, r.seed, r.auc, r.logloss, r.n_test
        ));
    }
    out
}

/// Tab-separated table of per-variant means and standard deviations.
pub fn summary_table(summaries: &[VariantSummary]) -> String {
    let mut out = String::from("variant\tseeds\tauc_mean\tauc_std\tlogloss_mean\tlogloss_std\n");
    for s in summaries {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            s.variant, s.seeds, s.auc_mean, s.auc_std, s.logloss_mean, s.logloss_std
        ));
    }
    out
}
