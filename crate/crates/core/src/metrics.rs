//! Single-relevant-label ranking metrics.
//!
//! Each datapoint has exactly one correct label, so with `r` its 1-based rank:
//! MAP@k averages `1/r` over points with `r <= k`, NDCG averages
//! `1/log2(r + 1)`, recall@k is the share of points with `r <= k`.
//! A point whose label was never ranked contributes 0 to all three and is
//! counted at a penalty rank (the catalog size) for mean and median rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    Empty,
    #[error("cut-off k must be at least 1")]
    InvalidK,
    #[error("no cut-off values given")]
    NoKValues,
    #[error("record {0} has rank 0; ranks are 1-based")]
    ZeroRank(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub point_id: String,
    /// `None` when the method's ordering never reached the true label.
    pub true_rank: Option<usize>,
    /// Cosine between the generated hypothesis and the true label.
    pub hypothesis_cosine: Option<f64>,
}

impl RankRecord {
    pub fn new(point_id: impl Into<String>, true_rank: Option<usize>) -> Self {
        Self { point_id: point_id.into(), true_rank, hypothesis_cosine: None }
    }

    pub fn with_cosine(mut self, cosine: f64) -> Self {
        self.hypothesis_cosine = Some(cosine);
        self
    }
}

fn check(records: &[RankRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(r) = records.iter().find(|r| r.true_rank == Some(0)) {
        return Err(MetricsError::ZeroRank(r.point_id.clone()));
    }
    Ok(records.len() as f64)
}

fn mean_of(records: &[RankRecord], f: impl Fn(usize) -> f64) -> Result<f64, MetricsError> {
    let n = check(records)?;
    Ok(records.iter().filter_map(|r| r.true_rank).map(f).sum::<f64>() / n)
}

pub fn map_at_k(records: &[RankRecord], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    mean_of(records, |r| if r <= k { 1.0 / r as f64 } else { 0.0 })
}

pub fn ndcg(records: &[RankRecord]) -> Result<f64, MetricsError> {
    mean_of(records, |r| 1.0 / (r as f64 + 1.0).log2())
}

pub fn recall_at_k(records: &[RankRecord], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    mean_of(records, |r| if r <= k { 1.0 } else { 0.0 })
}

fn ranks_with_penalty(records: &[RankRecord], penalty_rank: usize) -> Result<Vec<f64>, MetricsError> {
    check(records)?;
    Ok(records.iter().map(|r| r.true_rank.unwrap_or(penalty_rank) as f64).collect())
}

pub fn mean_rank(records: &[RankRecord], penalty_rank: usize) -> Result<f64, MetricsError> {
    let ranks = ranks_with_penalty(records, penalty_rank)?;
    Ok(ranks.iter().sum::<f64>() / ranks.len() as f64)
}

/// Middle value; the mean of the two middle values for even counts.
pub fn median_rank(records: &[RankRecord], penalty_rank: usize) -> Result<f64, MetricsError> {
    let mut ranks = ranks_with_penalty(records, penalty_rank)?;
    ranks.sort_by(f64::total_cmp);
    let mid = ranks.len() / 2;
    Ok(if ranks.len() % 2 == 1 { ranks[mid] } else { (ranks[mid - 1] + ranks[mid]) / 2.0 })
}

pub const DEFAULT_K_VALUES: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub k_values: Vec<usize>,
    pub map_at_k: BTreeMap<usize, f64>,
    pub ndcg: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub mean_cosine: Option<f64>,
    /// Records whose true label was never ranked.
    pub n_absent: usize,
}

impl MetricSummary {
    /// `(metric name, value)` rows in a fixed order, e.g. for CSV output.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        for k in &self.k_values {
            rows.push((format!("map@{k}"), self.map_at_k[k]));
        }
        rows.push(("ndcg".into(), self.ndcg));
        for k in &self.k_values {
            rows.push((format!("recall@{k}"), self.recall_at_k[k]));
        }
        rows.push(("mean_rank".into(), self.mean_rank));
        rows.push(("median_rank".into(), self.median_rank));
        if let Some(c) = self.mean_cosine {
            rows.push(("mean_cosine".into(), c));
        }
        rows
    }
}

pub fn summarize(
    records: &[RankRecord],
    k_values: &[usize],
    penalty_rank: usize,
) -> Result<MetricSummary, MetricsError> {
    if k_values.is_empty() {
        return Err(MetricsError::NoKValues);
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut map = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &k in &ks {
        map.insert(k, map_at_k(records, k)?);
        recall.insert(k, recall_at_k(records, k)?);
    }
    let cosines: Vec<f64> = records.iter().filter_map(|r| r.hypothesis_cosine).collect();
    let mean_cosine = (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
    Ok(MetricSummary {
        n: records.len(),
        k_values: ks,
        map_at_k: map,
        ndcg: ndcg(records)?,
        recall_at_k: recall,
        mean_rank: mean_rank(records, penalty_rank)?,
        median_rank: median_rank(records, penalty_rank)?,
        mean_cosine,
        n_absent: records.iter().filter(|r| r.true_rank.is_none()).count(),
    })
}
