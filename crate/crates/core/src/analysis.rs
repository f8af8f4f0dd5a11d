//! Attention diagnostics over recorded traces: role-wise maximum attention,
//! role-wise entropy and the sentences a source token attends to most.
//!
//! Inputs are one `Vec<AttentionTrace>` (one trace per layer) per sequence,
//! paired with the sequence's layout. All statistics accumulate in `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::attention::AttentionTrace;
use crate::error::{QdstError, Result};
use crate::pattern::{SequenceLayout, TokenRole};

/// Target roles profiled by [`role_max_attention`].
pub const TARGET_ROLES: [TokenRole; 3] = [TokenRole::Query, TokenRole::Sos, TokenRole::Cls];

/// Source roles profiled by [`role_entropy`].
pub const SOURCE_ROLES: [TokenRole; 5] = [
    TokenRole::Cls,
    TokenRole::Query,
    TokenRole::Sep,
    TokenRole::Sos,
    TokenRole::Doc,
];

/// Per-layer, per-role means. Layers are numbered from 1; a missing entry
/// means no row contributed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoleProfile {
    pub num_layers: usize,
    values: BTreeMap<(usize, RoleKey), f64>,
}

/// `TokenRole` ordered for stable output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RoleKey(u8);

impl RoleKey {
    fn of(role: TokenRole) -> Self {
        Self(role as u8)
    }

    fn role(self) -> TokenRole {
        [
            TokenRole::Cls,
            TokenRole::Query,
            TokenRole::Sep,
            TokenRole::Sos,
            TokenRole::Doc,
            TokenRole::Pad,
        ][self.0 as usize]
    }
}

impl RoleProfile {
    pub fn get(&self, layer: usize, role: TokenRole) -> Option<f64> {
        self.values.get(&(layer, RoleKey::of(role))).copied()
    }

    /// `(layer, role, value)` rows in layer then role order.
    pub fn rows(&self) -> Vec<(usize, TokenRole, f64)> {
        self.values.iter().map(|(&(l, r), &v)| (l, r.role(), v)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["layer", "role", "value"]).map_err(|e| csv_err(path, e))?;
        for (layer, role, value) in self.rows() {
            w.write_record([layer.to_string(), role.as_str().to_string(), value.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| QdstError::io(path, e))
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: u64,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }
}

fn check_inputs(traces: &[Vec<AttentionTrace>], layouts: &[SequenceLayout]) -> Result<usize> {
    if traces.is_empty() {
        return Err(QdstError::invalid("no attention traces given"));
    }
    if traces.len() != layouts.len() {
        return Err(QdstError::invalid(format!(
            "{} trace sets for {} layouts",
            traces.len(),
            layouts.len()
        )));
    }
    let layers = traces[0].len();
    for (k, (t, layout)) in traces.iter().zip(layouts).enumerate() {
        if t.is_empty() || t.len() != layers {
            return Err(QdstError::invalid(format!(
                "input {k} has {} layers, expected {layers} (and at least one)",
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|tr| tr.n() != layout.n()) {
            return Err(QdstError::invalid(format!(
                "input {k}: trace over {} positions for a layout of {}",
                bad.n(),
                layout.n()
            )));
        }
    }
    Ok(layers)
}

fn finish(num_layers: usize, acc: BTreeMap<(usize, RoleKey), Mean>) -> RoleProfile {
    let values = acc
        .into_iter()
        .filter(|(_, m)| m.count > 0)
        .map(|(k, m)| (k, m.sum / m.count as f64))
        .collect();
    RoleProfile { num_layers, values }
}

/// For every layer and target role: the mean, over inputs, heads and active
/// source rows, of the largest weight the row puts on a reachable token of
/// that role. Rows that cannot reach the role are left out of its mean.
pub fn role_max_attention(traces: &[Vec<AttentionTrace>], layouts: &[SequenceLayout]) -> Result<RoleProfile> {
    let layers = check_inputs(traces, layouts)?;
    let mut acc: BTreeMap<(usize, RoleKey), Mean> = BTreeMap::new();
    for (per_layer, layout) in traces.iter().zip(layouts) {
        for (l, trace) in per_layer.iter().enumerate() {
            for i in 0..layout.active_len() {
                for head in 0..trace.num_heads() {
                    let (cols, vals) = trace.row(head, i);
                    for role in TARGET_ROLES {
                        let best = cols
                            .iter()
                            .zip(vals)
                            .filter(|(&j, _)| layout.role(j as usize) == role)
                            .map(|(_, &w)| w)
                            .fold(None, |m: Option<f64>, w| Some(m.map_or(w, |m| m.max(w))));
                        if let Some(best) = best {
                            acc.entry((l + 1, RoleKey::of(role))).or_default().add(best);
                        }
                    }
                }
            }
        }
    }
    Ok(finish(layers, acc))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

/// Mean entropy of each active row's distribution, grouped by the role of the
/// source token.
pub fn role_entropy(traces: &[Vec<AttentionTrace>], layouts: &[SequenceLayout]) -> Result<RoleProfile> {
    let layers = check_inputs(traces, layouts)?;
    let mut acc: BTreeMap<(usize, RoleKey), Mean> = BTreeMap::new();
    for (per_layer, layout) in traces.iter().zip(layouts) {
        for (l, trace) in per_layer.iter().enumerate() {
            for i in 0..layout.active_len() {
                let key = (l + 1, RoleKey::of(layout.role(i)));
                for head in 0..trace.num_heads() {
                    acc.entry(key).or_default().add(entropy(trace.row(head, i).1));
                }
            }
        }
    }
    Ok(finish(layers, acc))
}

/// Row whose attention is inspected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cls,
    /// Offset within the query span.
    QueryToken(usize),
}

impl Source {
    fn position(self, layout: &SequenceLayout) -> Result<usize> {
        match self {
            Source::Cls => Ok(0),
            Source::QueryToken(k) if k < layout.query_len() => Ok(layout.query_span().start + k),
            Source::QueryToken(k) => Err(QdstError::invalid(format!(
                "query token {k} out of range for a query of {} tokens",
                layout.query_len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SentenceHit {
    pub head: usize,
    pub sentence: usize,
    pub weight: f64,
}

fn layer_trace(traces: &[AttentionTrace], layer: usize) -> Result<&AttentionTrace> {
    if layer == 0 || layer > traces.len() {
        return Err(QdstError::invalid(format!(
            "layer {layer} out of range 1..={}",
            traces.len()
        )));
    }
    Ok(&traces[layer - 1])
}

fn rank(mut hits: Vec<SentenceHit>, top_k: usize) -> Vec<SentenceHit> {
    hits.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.sentence.cmp(&b.sentence)));
    hits.truncate(top_k);
    hits
}

/// Sentences ranked by the attention `source` puts on their `[SOS]` token at
/// `layer` (1-based). With `per_head` every head is ranked separately (output
/// grouped by head); otherwise each sentence takes its best head.
pub fn top_attended_sentences(
    traces: &[AttentionTrace],
    layout: &SequenceLayout,
    source: Source,
    layer: usize,
    per_head: bool,
    top_k: usize,
) -> Result<Vec<SentenceHit>> {
    let trace = layer_trace(traces, layer)?;
    let src = source.position(layout)?;
    let starts = layout.sentence_starts();
    if starts.is_empty() {
        return Err(QdstError::EmptyResult("layout has no [SOS] tokens".into()));
    }
    let heads = trace.num_heads();
    if per_head {
        let mut out = Vec::new();
        for head in 0..heads {
            let hits = starts
                .iter()
                .enumerate()
                .map(|(s, &pos)| SentenceHit {
                    head,
                    sentence: s,
                    weight: trace.weight(head, src, pos),
                })
                .collect();
            out.extend(rank(hits, top_k));
        }
        Ok(out)
    } else {
        let hits = starts
            .iter()
            .enumerate()
            .map(|(s, &pos)| {
                let (head, weight) = (0..heads)
                    .map(|h| (h, trace.weight(h, src, pos)))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                SentenceHit {
                    head,
                    sentence: s,
                    weight,
                }
            })
            .collect();
        Ok(rank(hits, top_k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryTokenHit {
    pub sentence: usize,
    /// Absolute position of the winning query token.
    pub position: usize,
    pub head: usize,
    pub weight: f64,
}

/// For each sentence, the query token its `[SOS]` attends to most (over all
/// heads) at `layer`. Ties go to the lowest position, then the lowest head.
pub fn top_query_token_per_sentence(
    traces: &[AttentionTrace],
    layout: &SequenceLayout,
    layer: usize,
) -> Result<Vec<QueryTokenHit>> {
    let trace = layer_trace(traces, layer)?;
    let mut out = Vec::with_capacity(layout.sentence_starts().len());
    for (s, &sos) in layout.sentence_starts().iter().enumerate() {
        let mut best = QueryTokenHit {
            sentence: s,
            position: layout.query_span().start,
            head: 0,
            weight: f64::NEG_INFINITY,
        };
        for position in layout.query_span() {
            for head in 0..trace.num_heads() {
                let weight = trace.weight(head, sos, position);
                if weight > best.weight {
                    best = QueryTokenHit {
                        sentence: s,
                        position,
                        head,
                        weight,
                    };
                }
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// One `top_sentences.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopSentenceRow {
    pub qid: String,
    pub docid: String,
    pub head: usize,
    pub sentence_idx: usize,
    pub weight: f64,
    pub sentence_text: String,
}

pub fn write_top_sentences_csv(rows: &[TopSentenceRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(["qid", "docid", "head", "sentence_idx", "weight", "sentence_text"])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| QdstError::io(path, e))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> QdstError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => QdstError::io(path, io),
        other => QdstError::InvalidState(format!("writing {}: {other:?}", path.display())),
    }
}
