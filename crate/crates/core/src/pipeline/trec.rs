//! TREC qrels (`qid 0 docid grade`) and run (`qid Q0 docid rank score tag`) files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{QdstError, Result};

/// Graded judgments per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, HashMap<String, u32>>,
    max_grade: u32,
    /// Number of negative grades (TREC "unjudged"/junk) mapped to 0 on load.
    pub negative_grades_mapped: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.max_grade = self.max_grade.max(grade);
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    /// Grade of a document; unjudged documents count as 0.
    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn query(&self, query_id: &str) -> Option<&HashMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn max_grade(&self) -> u32 {
        self.max_grade
    }

    /// Overrides the grade scale maximum (it must cover every stored grade).
    pub fn set_max_grade(&mut self, max_grade: u32) -> Result<()> {
        let seen = self.judgments.values().flat_map(|m| m.values()).copied().max().unwrap_or(0);
        if max_grade < seen {
            return Err(QdstError::invalid(format!(
                "max_grade {max_grade} is below an existing grade {seen}"
            )));
        }
        self.max_grade = max_grade;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(HashMap::len).sum()
    }

    /// Number of documents with grade `>= threshold` for a query.
    pub fn relevant_count(&self, query_id: &str, threshold: u32) -> usize {
        self.query(query_id)
            .map_or(0, |m| m.values().filter(|&&g| g >= threshold).count())
    }
}

/// One query's ranked list: descending score, ties broken by ascending doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    pub query_id: String,
    entries: Vec<(String, f64)>,
}

impl RunList {
    pub fn new(query_id: impl Into<String>, mut entries: Vec<(String, f64)>) -> Result<Self> {
        let query_id = query_id.into();
        if let Some((doc, s)) = entries.iter().find(|(_, s)| s.is_nan()) {
            return Err(QdstError::invalid(format!("score {s} for {query_id}/{doc} is not a number")));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut seen = HashSet::with_capacity(entries.len());
        for (doc, _) in &entries {
            if !seen.insert(doc.as_str()) {
                return Err(QdstError::invalid(format!("duplicate document {doc} in run for query {query_id}")));
            }
        }
        Ok(Self { query_id, entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A full run: one ranked list per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub lists: BTreeMap<String, RunList>,
}

impl Run {
    pub fn insert(&mut self, list: RunList) {
        self.lists.insert(list.query_id.clone(), list);
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| QdstError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> QdstError {
    QdstError::ParseError {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 4 fields (qid 0 docid grade), found {}", fields.len()),
            ));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("grade '{}' is not an integer", fields[3])))?;
        let grade = if grade < 0 {
            qrels.negative_grades_mapped += 1;
            0
        } else {
            u32::try_from(grade).map_err(|_| parse_err(path, line_no, "grade out of range"))?
        };
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(&read_lines(path)?, path)
}

pub fn parse_run(text: &str, path: &Path) -> Result<Run> {
    let mut grouped: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 6 fields (qid Q0 docid rank score tag), found {}", fields.len()),
            ));
        }
        fields[3]
            .parse::<usize>()
            .map_err(|_| parse_err(path, line_no, format!("rank '{}' is not a positive integer", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("score '{}' is not a number", fields[4])))?;
        grouped
            .entry(fields[0].to_string())
            .or_default()
            .push((fields[2].to_string(), score));
    }
    let mut run = Run::default();
    for (qid, entries) in grouped {
        let list = RunList::new(qid, entries).map_err(|e| parse_err(path, 0, e.to_string()))?;
        run.insert(list);
    }
    Ok(run)
}

pub fn read_run(path: &Path) -> Result<Run> {
    parse_run(&read_lines(path)?, path)
}

/// Formats a run with ranks `1..k` following the list order.
pub fn format_run(run: &Run, tag: &str) -> String {
    let mut out = String::new();
    for list in run.lists.values() {
        for (rank, (doc, score)) in list.entries().iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {} {} {} {}", list.query_id, doc, rank + 1, score, tag);
        }
    }
    out
}

pub fn write_run(run: &Run, tag: &str, path: &Path) -> Result<()> {
    std::fs::write(path, format_run(run, tag)).map_err(|e| QdstError::io(path, e))
}
