//! Data ingestion, tokenisation, reranking and ranking metrics.

pub mod corpus;
pub mod metrics;
pub mod rerank;
pub mod synthetic;
pub mod text;
pub mod training;
pub mod trec;

pub use corpus::{load_queries, Corpus, Document, Query};
pub use metrics::{
    average_precision_grades, err_at_k, err_grades, evaluate, mean_average_precision, mrr_at_k, ndcg_at_k,
    ndcg_grades, reciprocal_rank_grades, EvalOptions, Gain, Metric, MetricReport,
};
pub use rerank::rerank;
pub use text::{split_sentences, tokenize, tokenize_frozen, Vocabulary};
pub use trec::{format_run, parse_qrels, parse_run, read_qrels, read_run, write_run, Qrels, Run, RunList};
pub use synthetic::{generate, write_dataset, DatasetFiles, RankingData, SyntheticSpec};
pub use training::{fit, rerank_dataset, CurvePoint, FitOptions, FitOutcome};
