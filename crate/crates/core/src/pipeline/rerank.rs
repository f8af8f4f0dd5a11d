use super::corpus::Corpus;
use super::trec::RunList;
use crate::error::{QdstError, Result};
use crate::model::Model;
use crate::tensor::Real;

/// Scores every candidate with `model` and orders them by descending score,
/// ties by ascending doc id. Documents longer than the model's `max_len` are
/// truncated at the tail.
pub fn rerank<T: Real>(
    query_id: &str,
    query_tokens: &[u32],
    candidates: &[String],
    corpus: &Corpus,
    model: &Model<T>,
) -> Result<RunList> {
    let missing: Vec<String> = candidates.iter().filter(|d| corpus.get(d).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(QdstError::MissingDocument(missing));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for doc_id in candidates {
        let doc = corpus.get(doc_id).expect("checked above");
        let score = model.score(query_tokens, &doc.sentences)?.as_f64();
        if !score.is_finite() {
            return Err(QdstError::NumericalError(format!(
                "score {score} for query {query_id}, document {doc_id}"
            )));
        }
        scored.push((doc_id.clone(), score));
    }
    RunList::new(query_id, scored)
}
