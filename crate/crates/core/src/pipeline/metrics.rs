//! Ranking metrics. Per-list functions take the grades of a ranked list in
//! rank order; the run-level [`evaluate`] looks grades up in the qrels
//! (unjudged documents count as 0) and averages over judged queries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::trec::{Qrels, Run};
use crate::error::{QdstError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `2^g - 1`
    #[default]
    Exp,
    /// `g`
    Linear,
}

impl Gain {
    pub fn value(self, grade: u32) -> f64 {
        match self {
            Gain::Exp => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => grade as f64,
        }
    }
}

impl FromStr for Gain {
    type Err = QdstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Gain::Exp),
            "linear" => Ok(Gain::Linear),
            other => Err(QdstError::invalid(format!("unknown gain '{other}' (expected exp or linear)"))),
        }
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn dcg(grades: &[u32], k: usize, gain: Gain) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &g)| gain.value(g) * discount(r + 1))
        .sum()
}

/// NDCG@k given the ranked grades and every judged grade for the query.
/// `None` when the query has no relevant document.
pub fn ndcg_grades(ranked: &[u32], judged: &[u32], k: usize, gain: Gain) -> Option<f64> {
    let mut ideal = judged.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k, gain);
    (idcg > 0.0).then(|| dcg(ranked, k, gain) / idcg)
}

/// Reciprocal rank of the first grade `>= threshold` within the top `k`.
pub fn reciprocal_rank_grades(ranked: &[u32], k: usize, threshold: u32) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&g| g >= threshold)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Average precision with `total_relevant` judged relevant documents.
/// `None` when there are none.
pub fn average_precision_grades(ranked: &[u32], total_relevant: usize, threshold: u32) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &g) in ranked.iter().enumerate() {
        if g >= threshold {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Expected reciprocal rank at cut-off `k`.
pub fn err_grades(ranked: &[u32], k: usize, max_grade: u32) -> f64 {
    let denom = 2f64.powi(max_grade as i32);
    let mut not_stopped = 1.0;
    let mut total = 0.0;
    for (r, &g) in ranked.iter().take(k).enumerate() {
        let p = (2f64.powi(g as i32) - 1.0) / denom;
        total += not_stopped * p / (r + 1) as f64;
        not_stopped *= 1.0 - p;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg(usize),
    Mrr(usize),
    Map,
    Err(usize),
}

impl FromStr for Metric {
    type Err = QdstError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "map" {
            return Ok(Metric::Map);
        }
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| QdstError::invalid(format!("metric '{s}' needs a cut-off, e.g. ndcg@10")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| QdstError::invalid(format!("cut-off in '{s}' must be an integer >= 1")))?;
        match name {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "err" => Ok(Metric::Err(k)),
            _ => Err(QdstError::invalid(format!(
                "unknown metric '{s}' (expected ndcg@k, mrr@k, map or err@k)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Map => f.write_str("map"),
            Metric::Err(k) => write!(f, "err@{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub gain: Gain,
    /// Minimum grade counted as relevant by MRR and MAP.
    pub positive_threshold: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gain: Gain::Exp,
            positive_threshold: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    /// Queries contributing to the mean, in query id order.
    pub per_query: Vec<(String, f64)>,
    /// Queries without any relevant document. NDCG keeps them (as 0), MAP drops them.
    pub flagged: Vec<String>,
    /// Run queries with no judgments at all; skipped.
    pub unjudged: Vec<String>,
    pub mean: f64,
}

/// Evaluates every run query that has judgments.
pub fn evaluate(metric: Metric, run: &Run, qrels: &Qrels, opts: EvalOptions) -> Result<MetricReport> {
    if opts.positive_threshold == 0 {
        return Err(QdstError::invalid("positive_threshold must be >= 1"));
    }
    let mut per_query = Vec::new();
    let mut flagged = Vec::new();
    let mut unjudged = Vec::new();
    for (qid, list) in &run.lists {
        let Some(judged) = qrels.query(qid) else {
            unjudged.push(qid.clone());
            continue;
        };
        let ranked: Vec<u32> = list.doc_ids().map(|d| qrels.grade(qid, d)).collect();
        let value = match metric {
            Metric::Ndcg(k) => {
                let all: Vec<u32> = judged.values().copied().collect();
                ndcg_grades(&ranked, &all, k, opts.gain).or_else(|| {
                    flagged.push(qid.clone());
                    Some(0.0)
                })
            }
            Metric::Mrr(k) => Some(reciprocal_rank_grades(&ranked, k, opts.positive_threshold)),
            Metric::Map => {
                let r = qrels.relevant_count(qid, opts.positive_threshold);
                average_precision_grades(&ranked, r, opts.positive_threshold).or_else(|| {
                    flagged.push(qid.clone());
                    None
                })
            }
            Metric::Err(k) => Some(err_grades(&ranked, k, qrels.max_grade())),
        };
        if let Some(v) = value {
            per_query.push((qid.clone(), v));
        }
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(MetricReport {
        metric,
        per_query,
        flagged,
        unjudged,
        mean,
    })
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    evaluate(Metric::Ndcg(k), run, qrels, EvalOptions { gain, ..Default::default() })
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize, positive_threshold: u32) -> Result<MetricReport> {
    evaluate(
        Metric::Mrr(k),
        run,
        qrels,
        EvalOptions {
            positive_threshold,
            ..Default::default()
        },
    )
}

pub fn mean_average_precision(run: &Run, qrels: &Qrels, positive_threshold: u32) -> Result<MetricReport> {
    evaluate(
        Metric::Map,
        run,
        qrels,
        EvalOptions {
            positive_threshold,
            ..Default::default()
        },
    )
}

pub fn err_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(Metric::Err(k), run, qrels, EvalOptions::default())
}
