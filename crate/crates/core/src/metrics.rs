//! Top-K accuracy, group decomposition and user-oriented group fairness (UGF).

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::cdr::{top_k_excluding, CdrModel, VirtualSources};
use crate::dataset::CdrData;
use crate::error::{Error, Result};
use crate::params::Matrix;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// 1.0 if any relevant item is among the first `k` ranked items.
pub fn hit_rate_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if ranked.iter().take(k).any(|i| relevant.contains(i)) { 1.0 } else { 0.0 })
}

/// DCG over the first `k` positions divided by the ideal DCG for
/// `min(k, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Err(Error::EmptyGroup("relevant items".into()));
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    Ok(dcg / idcg)
}

/// `1 / log2(position + 1)` for a 0-based position.
fn discount(p: usize) -> f64 {
    1.0 / ((p + 2) as f64).log2()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("K must be at least 1"))
    } else {
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `|mean(overlap) − mean(nonoverlap)|`.
pub fn ugf(overlap: &[f64], nonoverlap: &[f64]) -> Result<f64> {
    if overlap.is_empty() {
        return Err(Error::EmptyGroup("overlap".into()));
    }
    if nonoverlap.is_empty() {
        return Err(Error::EmptyGroup("nonoverlap".into()));
    }
    Ok((mean(overlap) - mean(nonoverlap)).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    HR,
    NDCG,
}

/// Metric values of one evaluated user, indexed like the `ks` they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub overlapping: bool,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// One row of the report. Group means are `None` when the group is empty,
/// in which case UGF is undefined too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    #[serde(rename = "K")]
    pub k: usize,
    pub all: f64,
    pub overlap: Option<f64>,
    pub nonoverlap: Option<f64>,
    pub ugf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub rows: Vec<MetricRow>,
    pub n_all: usize,
    pub n_overlap: usize,
    pub n_nonoverlap: usize,
    /// Users without any positive in the evaluated split.
    pub skipped: usize,
}

impl EvalReport {
    pub fn row(&self, metric: Metric, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric && r.k == k)
    }

    /// Overall NDCG@k, or 0 when `k` was not evaluated.
    pub fn ndcg(&self, k: usize) -> f64 {
        self.row(Metric::NDCG, k).map_or(0.0, |r| r.all)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const SCORE_CHUNK: usize = 512;

/// Coupled user vectors of all target users (one row each).
pub fn user_matrix(model: &CdrModel, virtuals: &VirtualSources) -> Result<Matrix> {
    let mut out = Matrix::zeros((model.n_target_users(), model.dim()));
    for (u, mut row) in out.outer_iter_mut().enumerate() {
        row.assign(&model.user_vector(u, virtuals.get(u))?);
    }
    Ok(out)
}

/// Per-user metrics for every target user with at least one positive in
/// `split`. Candidates are all target items except the user's train positives.
pub fn per_user_metrics(
    model: &CdrModel,
    virtuals: &VirtualSources,
    data: &CdrData,
    ks: &[usize],
    split: EvalSplit,
) -> Result<(Vec<UserMetrics>, usize)> {
    for &k in ks {
        check_k(k)?;
    }
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::invalid("no K values"))?;
    let ts = &data.target_split;
    let held_out = match split {
        EvalSplit::Valid => &ts.valid,
        EvalSplit::Test => &ts.test,
    };
    let users = user_matrix(model, virtuals)?;
    let source_of = &model.source_of_target;
    let mut out = Vec::new();
    let mut skipped = 0;
    let n = users.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let scores = users.slice(s![start..end, ..]).dot(&model.item_tgt.t());
        for (r, row) in scores.outer_iter().enumerate() {
            let u = start + r;
            let relevant = &held_out[u];
            if relevant.is_empty() {
                skipped += 1;
                continue;
            }
            let row = row.to_vec();
            let ranked = top_k_excluding(&row, max_k, &ts.train[u]);
            let mut hr = Vec::with_capacity(ks.len());
            let mut ndcg = Vec::with_capacity(ks.len());
            for &k in ks {
                hr.push(hit_rate_at_k(&ranked, relevant, k)?);
                ndcg.push(ndcg_at_k(&ranked, relevant, k)?);
            }
            out.push(UserMetrics {
                user: u,
                overlapping: source_of[u].is_some(),
                hr,
                ndcg,
            });
        }
        start = end;
    }
    Ok((out, skipped))
}

/// Aggregates per-user metrics into a report.
pub fn aggregate(users: &[UserMetrics], ks: &[usize], split: EvalSplit, skipped: usize) -> Result<EvalReport> {
    if users.is_empty() {
        return Err(Error::EmptyGroup(format!("users with {split:?} positives")));
    }
    let (ov, non): (Vec<&UserMetrics>, Vec<&UserMetrics>) = users.iter().partition(|m| m.overlapping);
    let mut rows = Vec::new();
    for metric in [Metric::HR, Metric::NDCG] {
        for (idx, &k) in ks.iter().enumerate() {
            let pick = |m: &&UserMetrics| match metric {
                Metric::HR => m.hr[idx],
                Metric::NDCG => m.ndcg[idx],
            };
            let all: Vec<f64> = users.iter().map(|m| pick(&m)).collect();
            let o: Vec<f64> = ov.iter().map(pick).collect();
            let nn: Vec<f64> = non.iter().map(pick).collect();
            let group_mean = |xs: &[f64]| if xs.is_empty() { None } else { Some(mean(xs)) };
            let (om, nm) = (group_mean(&o), group_mean(&nn));
            rows.push(MetricRow {
                metric,
                k,
                all: mean(&all),
                overlap: om,
                nonoverlap: nm,
                ugf: om.zip(nm).map(|(a, b)| (a - b).abs()),
            });
        }
    }
    Ok(EvalReport {
        split,
        rows,
        n_all: users.len(),
        n_overlap: ov.len(),
        n_nonoverlap: non.len(),
        skipped,
    })
}

pub fn evaluate(
    model: &CdrModel,
    virtuals: &VirtualSources,
    data: &CdrData,
    ks: &[usize],
    split: EvalSplit,
) -> Result<EvalReport> {
    let (users, skipped) = per_user_metrics(model, virtuals, data, ks, split)?;
    aggregate(&users, ks, split, skipped)
}
