//! Planted-phrase ranking task. Every query owns a short phrase of key
//! words; its relevant candidates contain that phrase somewhere in the text,
//! the others are filler, and some of them carry another query's phrase.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Document, Query};
use super::text::{tokenize, Vocabulary};
use super::trec::{format_run, Qrels, Run, RunList};
use crate::error::{QdstError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_queries: usize,
    pub candidates_per_query: usize,
    pub relevant_per_query: usize,
    pub phrase_len: usize,
    pub filler_vocab: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Probability that a non-relevant candidate contains another query's phrase.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_queries: 200,
            candidates_per_query: 20,
            relevant_per_query: 1,
            phrase_len: 2,
            filler_vocab: 400,
            min_sentences: 3,
            max_sentences: 5,
            min_sentence_len: 5,
            max_sentence_len: 10,
            distractor_rate: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.num_queries >= 2, "num_queries must be >= 2"),
            (self.candidates_per_query >= 2, "candidates_per_query must be >= 2"),
            (
                self.relevant_per_query >= 1 && self.relevant_per_query < self.candidates_per_query,
                "relevant_per_query must be in [1, candidates_per_query)",
            ),
            (self.phrase_len >= 1, "phrase_len must be >= 1"),
            (self.filler_vocab >= 1, "filler_vocab must be >= 1"),
            (
                self.min_sentences >= 1 && self.min_sentences <= self.max_sentences,
                "need 1 <= min_sentences <= max_sentences",
            ),
            (
                self.min_sentence_len >= self.phrase_len && self.min_sentence_len <= self.max_sentence_len,
                "need phrase_len <= min_sentence_len <= max_sentence_len",
            ),
            ((0.0..=1.0).contains(&self.distractor_rate), "distractor_rate must be in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(QdstError::invalid(*msg)),
            None => Ok(()),
        }
    }

    /// Longest possible document in tokens.
    pub fn max_doc_tokens(&self) -> usize {
        self.max_sentences * (self.max_sentence_len + 1)
    }
}

/// Queries, corpus, judgments and first-stage candidate lists.
#[derive(Debug, Clone)]
pub struct RankingData {
    pub queries: Vec<Query>,
    pub corpus: Corpus,
    pub qrels: Qrels,
    pub candidates: Run,
    pub vocab: Vocabulary,
}

impl RankingData {
    pub fn candidate_ids(&self, query_id: &str) -> Vec<String> {
        self.candidates
            .lists
            .get(query_id)
            .map(|l| l.doc_ids().map(str::to_string).collect())
            .unwrap_or_default()
    }
}

fn filler_word(i: usize) -> String {
    format!("w{i}")
}

fn key_word(query: usize, k: usize) -> String {
    format!("k{query}x{k}")
}

fn sentence<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Vec<String> {
    let len = rng.random_range(spec.min_sentence_len..=spec.max_sentence_len);
    (0..len).map(|_| filler_word(rng.random_range(0..spec.filler_vocab))).collect()
}

fn document<R: Rng>(rng: &mut R, spec: &SyntheticSpec, planted: Option<&[String]>) -> String {
    let count = rng.random_range(spec.min_sentences..=spec.max_sentences);
    let mut sentences: Vec<Vec<String>> = (0..count).map(|_| sentence(rng, spec)).collect();
    if let Some(phrase) = planted {
        let s = rng.random_range(0..count);
        let target = &mut sentences[s];
        let at = rng.random_range(0..=target.len() - phrase.len());
        target.splice(at..at + phrase.len(), phrase.iter().cloned());
    }
    let mut text = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        let _ = write!(text, "{}.", s.join(" "));
    }
    text
}

/// Generates the task deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<RankingData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocabulary::new();
    for i in 0..spec.filler_vocab {
        vocab.insert(&filler_word(i));
    }
    let phrases: Vec<Vec<String>> = (0..spec.num_queries)
        .map(|q| (0..spec.phrase_len).map(|k| key_word(q, k)).collect())
        .collect();
    for p in &phrases {
        for w in p {
            vocab.insert(w);
        }
    }

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut corpus = Corpus::new();
    let mut qrels = Qrels::new();
    let mut candidates = Run::default();
    for (q, phrase) in phrases.iter().enumerate() {
        let qid = format!("q{q}");
        let text = phrase.join(" ");
        queries.push(Query {
            query_id: qid.clone(),
            tokens: tokenize(&text, &mut vocab, false),
            text,
        });
        let mut ids = Vec::with_capacity(spec.candidates_per_query);
        for c in 0..spec.candidates_per_query {
            let doc_id = format!("{qid}d{c}");
            let relevant = c < spec.relevant_per_query;
            let planted = if relevant {
                Some(phrase.as_slice())
            } else if rng.random_bool(spec.distractor_rate) {
                let other = (q + rng.random_range(1..spec.num_queries)) % spec.num_queries;
                Some(phrases[other].as_slice())
            } else {
                None
            };
            let body = document(&mut rng, spec, planted);
            corpus.insert(Document::from_text(&doc_id, &body, &mut vocab, false)?)?;
            qrels.insert(&qid, &doc_id, u32::from(relevant));
            ids.push(doc_id);
        }
        ids.shuffle(&mut rng);
        let n = ids.len();
        let entries = ids.into_iter().enumerate().map(|(r, d)| (d, (n - r) as f64)).collect();
        candidates.insert(RunList::new(qid, entries)?);
    }
    Ok(RankingData {
        queries,
        corpus,
        qrels,
        candidates,
        vocab,
    })
}

/// Paths of a task written to disk.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub candidates: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            corpus: dir.join("corpus.tsv"),
            queries: dir.join("queries.tsv"),
            qrels: dir.join("qrels.txt"),
            candidates: dir.join("candidates.run"),
        }
    }
}

/// Writes corpus TSV, queries TSV, qrels and the candidate run into `dir`.
pub fn write_dataset(data: &RankingData, dir: &Path) -> Result<DatasetFiles> {
    std::fs::create_dir_all(dir).map_err(|e| QdstError::io(dir, e))?;
    let files = DatasetFiles::in_dir(dir);
    let mut corpus = String::new();
    for doc in data.corpus.iter() {
        let _ = writeln!(corpus, "{}\t{}", doc.doc_id, doc.raw_text);
    }
    let mut queries = String::new();
    for q in &data.queries {
        let _ = writeln!(queries, "{}\t{}", q.query_id, q.text);
    }
    let mut qrels = String::new();
    for q in &data.queries {
        let mut judged: Vec<_> = data.qrels.query(&q.query_id).into_iter().flatten().collect();
        judged.sort();
        for (doc, grade) in judged {
            let _ = writeln!(qrels, "{} 0 {} {}", q.query_id, doc, grade);
        }
    }
    for (path, body) in [
        (&files.corpus, corpus),
        (&files.queries, queries),
        (&files.qrels, qrels),
        (&files.candidates, format_run(&data.candidates, "first_stage")),
    ] {
        std::fs::write(path, body).map_err(|e| QdstError::io(path, e))?;
    }
    Ok(files)
}
