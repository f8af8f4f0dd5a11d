use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::text::{split_sentences, tokenize, Vocabulary};
use crate::error::{QdstError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    /// Token ids per sentence, none empty.
    pub sentences: Vec<Vec<u32>>,
    pub sentence_texts: Vec<String>,
    pub raw_text: String,
}

impl Document {
    /// Splits and tokenises `text`. Sentences without any word are dropped;
    /// a document left with no sentence is rejected.
    pub fn from_text(doc_id: &str, text: &str, vocab: &mut Vocabulary, build_mode: bool) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut sentence_texts = Vec::new();
        for s in split_sentences(text) {
            let ids = tokenize(&s, vocab, build_mode);
            if !ids.is_empty() {
                sentences.push(ids);
                sentence_texts.push(s);
            }
        }
        if sentences.is_empty() {
            return Err(QdstError::invalid(format!("document {doc_id} has no tokens")));
        }
        Ok(Self {
            doc_id: doc_id.to_string(),
            sentences,
            sentence_texts,
            raw_text: text.to_string(),
        })
    }
}

/// Documents keyed by id, immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: BTreeMap<String, Document>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: Document) -> Result<()> {
        if self.docs.contains_key(&doc.doc_id) {
            return Err(QdstError::invalid(format!("duplicate document id {}", doc.doc_id)));
        }
        self.docs.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    /// Loads `doc_id<TAB>text` lines, or JSON lines when the file ends in
    /// `.jsonl`.
    pub fn load(path: &Path, vocab: &mut Vocabulary, build_mode: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QdstError::io(path, e))?;
        let jsonl = path.extension().is_some_and(|e| e == "jsonl");
        let mut corpus = Self::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, body) = if jsonl {
                let rec: JsonDoc = serde_json::from_str(line).map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
                (rec.doc_id, rec.text)
            } else {
                let (id, body) = split_tab(line).ok_or_else(|| parse_err(path, idx + 1, "expected doc_id<TAB>text"))?;
                (id.to_string(), body.to_string())
            };
            let doc = Document::from_text(&id, &body, vocab, build_mode)
                .map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
            corpus.insert(doc).map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        }
        Ok(corpus)
    }
}

#[derive(Deserialize)]
struct JsonDoc {
    doc_id: String,
    text: String,
}

fn split_tab(line: &str) -> Option<(&str, &str)> {
    let (id, body) = line.split_once('\t')?;
    let id = id.trim();
    (!id.is_empty()).then_some((id, body))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> QdstError {
    QdstError::ParseError {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Reads `qid<TAB>query text` lines in file order.
pub fn load_queries(path: &Path, vocab: &mut Vocabulary, build_mode: bool) -> Result<Vec<Query>> {
    let text = std::fs::read_to_string(path).map_err(|e| QdstError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, body) = split_tab(line).ok_or_else(|| parse_err(path, idx + 1, "expected qid<TAB>text"))?;
        let tokens = tokenize(body, vocab, build_mode);
        if tokens.is_empty() {
            return Err(parse_err(path, idx + 1, format!("query {qid} has no tokens")));
        }
        out.push(Query {
            query_id: qid.to_string(),
            text: body.to_string(),
            tokens,
        });
    }
    Ok(out)
}
