//! Reranker training loop over a [`RankingData`] set with periodic evaluation.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{evaluate, EvalOptions, Metric, MetricReport};
use super::synthetic::RankingData;
use super::trec::{Run, RunList};
use crate::error::{QdstError, Result};
use crate::model::{AdamState, LossKind, Model, TrainConfig, TrainExample};
use crate::pattern::SequenceLayout;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    pub metric: Metric,
    pub eval: EvalOptions,
    /// Stop as soon as the metric reaches this value.
    pub target: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            eval_every: 50,
            metric: Metric::Mrr(10),
            eval: EvalOptions::default(),
            target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub curve: Vec<CurvePoint>,
    /// First evaluated step at which the target was met.
    pub steps_to_target: Option<u64>,
    pub final_report: MetricReport,
}

struct QueryLayouts {
    query_id: String,
    doc_ids: Vec<String>,
    layouts: Vec<SequenceLayout>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn prepare<T: Real>(model: &Model<T>, data: &RankingData, threshold: u32) -> Result<Vec<QueryLayouts>> {
    let mut out = Vec::with_capacity(data.queries.len());
    for q in &data.queries {
        let doc_ids = data.candidate_ids(&q.query_id);
        let mut layouts = Vec::with_capacity(doc_ids.len());
        let (mut positives, mut negatives) = (Vec::new(), Vec::new());
        for (i, d) in doc_ids.iter().enumerate() {
            let doc = data
                .corpus
                .get(d)
                .ok_or_else(|| QdstError::MissingDocument(vec![d.clone()]))?;
            layouts.push(model.layout(&q.tokens, &doc.sentences)?);
            if data.qrels.grade(&q.query_id, d) >= threshold {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        out.push(QueryLayouts {
            query_id: q.query_id.clone(),
            doc_ids,
            layouts,
            positives,
            negatives,
        });
    }
    Ok(out)
}

fn rerank_prepared<T: Real>(model: &Model<T>, prepared: &[QueryLayouts]) -> Result<Run> {
    let mut run = Run::default();
    for q in prepared {
        let mut entries = Vec::with_capacity(q.layouts.len());
        for (d, layout) in q.doc_ids.iter().zip(&q.layouts) {
            let s = model.score_layout(layout)?.as_f64();
            if !s.is_finite() {
                return Err(QdstError::NumericalError(format!("score {s} for {}/{d}", q.query_id)));
            }
            entries.push((d.clone(), s));
        }
        run.insert(RunList::new(q.query_id.clone(), entries)?);
    }
    Ok(run)
}

/// Reranks every query's candidates with `model`.
pub fn rerank_dataset<T: Real>(model: &Model<T>, data: &RankingData) -> Result<Run> {
    rerank_prepared(model, &prepare(model, data, 1)?)
}

/// Trains for up to `config.max_steps` Adam steps. Each step samples
/// `batch_size` queries that have both a positive and a negative candidate;
/// pairwise training uses one (positive, negative) pair per query, pointwise
/// training one labelled example of each.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    data: &RankingData,
    config: &TrainConfig,
    opts: &FitOptions,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<FitOutcome> {
    config.validate()?;
    let prepared = prepare(model, data, opts.eval.positive_threshold)?;
    let trainable: Vec<&QueryLayouts> = prepared
        .iter()
        .filter(|q| !q.positives.is_empty() && !q.negatives.is_empty())
        .collect();
    if trainable.is_empty() {
        return Err(QdstError::invalid("no query has both a relevant and a non-relevant candidate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamState::new(model);
    let mut curve = Vec::new();
    let mut steps_to_target = None;
    let evaluate_now = |model: &Model<T>| -> Result<MetricReport> {
        evaluate(opts.metric, &rerank_prepared(model, &prepared)?, &data.qrels, opts.eval)
    };

    for _ in 0..config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size * 2);
        for _ in 0..config.batch_size {
            let q = trainable.choose(&mut rng).expect("non-empty");
            let pos = &q.layouts[*q.positives.choose(&mut rng).expect("non-empty")];
            let neg = &q.layouts[*q.negatives.choose(&mut rng).expect("non-empty")];
            match config.loss_kind {
                LossKind::PairwiseSoftmax => batch.push(TrainExample::Pairwise {
                    positive: pos.clone(),
                    negative: neg.clone(),
                }),
                LossKind::PointwiseBce => {
                    batch.push(TrainExample::Pointwise {
                        layout: pos.clone(),
                        label: 1.0,
                    });
                    batch.push(TrainExample::Pointwise {
                        layout: neg.clone(),
                        label: 0.0,
                    });
                }
            }
        }
        let report = model.train_step(&batch, &mut optimizer, config, &mut rng)?;
        let metric = if opts.eval_every > 0 && report.step % opts.eval_every as u64 == 0 {
            Some(evaluate_now(model)?.mean)
        } else {
            None
        };
        let point = CurvePoint {
            step: report.step,
            loss: report.loss,
            metric,
        };
        on_point(&point);
        curve.push(point);
        if let (Some(m), Some(target)) = (metric, opts.target) {
            if m >= target {
                steps_to_target = Some(report.step);
                break;
            }
        }
    }
    let final_report = evaluate_now(model)?;
    Ok(FitOutcome {
        curve,
        steps_to_target,
        final_report,
    })
}
