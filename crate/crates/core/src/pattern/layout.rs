use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{QdstError, Result};

/// Reserved vocabulary ids. The pipeline vocabulary pins these at fixed
/// positions so layouts can be built from raw id lists.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const SOS: u32 = 4;
    /// Number of reserved ids; ordinary tokens start here.
    pub const RESERVED: u32 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenRole {
    Cls,
    Query,
    Sep,
    Sos,
    Doc,
    Pad,
}

impl TokenRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cls => "CLS",
            Self::Query => "QUERY",
            Self::Sep => "SEP",
            Self::Sos => "SOS",
            Self::Doc => "DOC",
            Self::Pad => "PAD",
        }
    }
}

/// A tokenized `[CLS] q [SEP] d` sequence with the role of every position.
///
/// All attention patterns are derived from this structure, so its invariants
/// are checked on construction and the fields are read-only afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<TokenRole>,
    token_ids: Vec<u32>,
    query_span: Range<usize>,
    sentence_starts: Vec<usize>,
}

impl SequenceLayout {
    /// Validates a role/token assignment.
    pub fn from_parts(roles: Vec<TokenRole>, token_ids: Vec<u32>) -> Result<Self> {
        use TokenRole::*;
        let n = roles.len();
        if token_ids.len() != n {
            return Err(QdstError::invalid(format!(
                "roles length {n} != token_ids length {}",
                token_ids.len()
            )));
        }
        if n < 3 {
            return Err(QdstError::invalid(format!("layout needs at least 3 tokens, got {n}")));
        }
        if roles[0] != Cls {
            return Err(QdstError::invalid("position 0 must be [CLS]"));
        }
        let query_end = 1 + roles[1..].iter().take_while(|&&r| r == Query).count();
        if query_end == 1 {
            return Err(QdstError::invalid("layout has no query tokens"));
        }
        if roles.get(query_end) != Some(&Sep) {
            return Err(QdstError::invalid("[SEP] must follow the last query token"));
        }
        let active = n - roles.iter().rev().take_while(|&&r| r == Pad).count();
        if roles[..active].contains(&Pad) {
            return Err(QdstError::invalid("PAD tokens must form a contiguous suffix"));
        }
        let doc = &roles[query_end + 1..active];
        if let Some(&first) = doc.first() {
            if first != Sos {
                return Err(QdstError::invalid("document must begin with [SOS]"));
            }
        }
        let mut sentence_starts = Vec::new();
        for (offset, &role) in doc.iter().enumerate() {
            let pos = query_end + 1 + offset;
            match role {
                Sos => {
                    if pos + 1 >= active {
                        return Err(QdstError::invalid(format!("[SOS] at {pos} starts an empty sentence")));
                    }
                    sentence_starts.push(pos);
                }
                Doc => {}
                other => {
                    return Err(QdstError::invalid(format!(
                        "unexpected {} token at position {pos} inside the document",
                        other.as_str()
                    )))
                }
            }
        }
        Ok(Self {
            roles,
            token_ids,
            query_span: 1..query_end,
            sentence_starts,
        })
    }

    pub fn n(&self) -> usize {
        self.roles.len()
    }

    /// Number of non-PAD positions (PAD is always a suffix).
    pub fn active_len(&self) -> usize {
        self.roles.len() - self.roles.iter().rev().take_while(|&&r| r == TokenRole::Pad).count()
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn query_span(&self) -> Range<usize> {
        self.query_span.clone()
    }

    pub fn query_len(&self) -> usize {
        self.query_span.len()
    }

    pub fn sentence_starts(&self) -> &[usize] {
        &self.sentence_starts
    }

    pub fn role(&self, pos: usize) -> TokenRole {
        self.roles[pos]
    }

    /// Position range of sentence `idx` including its `[SOS]`.
    pub fn sentence_span(&self, idx: usize) -> Range<usize> {
        let start = self.sentence_starts[idx];
        let end = self
            .sentence_starts
            .get(idx + 1)
            .copied()
            .unwrap_or_else(|| self.active_len());
        start..end
    }

    /// Appends PAD positions until the layout has `total_len` tokens.
    pub fn with_padding(&self, total_len: usize) -> Result<Self> {
        if total_len < self.n() {
            return Err(QdstError::invalid(format!(
                "cannot pad a layout of {} tokens to {total_len}",
                self.n()
            )));
        }
        let mut out = self.clone();
        out.roles.resize(total_len, TokenRole::Pad);
        out.token_ids.resize(total_len, special::PAD);
        Ok(out)
    }

    /// Same layout with different PAD token ids (for invariance checks).
    pub fn with_pad_ids(&self, ids: impl IntoIterator<Item = u32>) -> Self {
        let mut out = self.clone();
        let active = self.active_len();
        for (slot, id) in out.token_ids[active..].iter_mut().zip(ids) {
            *slot = id;
        }
        out
    }
}

/// Builds `[CLS] q [SEP] ([SOS] s_1) ([SOS] s_2) ...`, truncated at the tail to `max_len`.
///
/// The `[CLS] q [SEP]` prefix is never truncated. A sentence cut down to its
/// bare `[SOS]` is dropped entirely.
pub fn build_layout(query_tokens: &[u32], doc_sentences: &[Vec<u32>], max_len: usize) -> Result<SequenceLayout> {
    if query_tokens.is_empty() {
        return Err(QdstError::invalid("query must contain at least one token"));
    }
    let prefix = query_tokens.len() + 2;
    if max_len < prefix {
        return Err(QdstError::invalid(format!(
            "max_len {max_len} is shorter than the query prefix ({prefix} tokens)"
        )));
    }
    if let Some(idx) = doc_sentences.iter().position(|s| s.is_empty()) {
        return Err(QdstError::invalid(format!("sentence {idx} is empty")));
    }

    let mut roles = Vec::with_capacity(max_len.min(prefix + 64));
    let mut ids = Vec::with_capacity(roles.capacity());
    roles.push(TokenRole::Cls);
    ids.push(special::CLS);
    roles.extend(std::iter::repeat_n(TokenRole::Query, query_tokens.len()));
    ids.extend_from_slice(query_tokens);
    roles.push(TokenRole::Sep);
    ids.push(special::SEP);

    for sentence in doc_sentences {
        let room = max_len - roles.len();
        // Need space for the [SOS] and at least one token.
        if room < 2 {
            break;
        }
        let take = sentence.len().min(room - 1);
        roles.push(TokenRole::Sos);
        ids.push(special::SOS);
        roles.extend(std::iter::repeat_n(TokenRole::Doc, take));
        ids.extend_from_slice(&sentence[..take]);
    }
    SequenceLayout::from_parts(roles, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenRole::*;

    #[test]
    fn builds_two_sentence_example() {
        let (who, is, gray, robert, a, captain) = (10, 11, 12, 13, 14, 15);
        let layout = build_layout(&[who, is, gray], &[vec![robert, gray], vec![a, captain]], 32).unwrap();
        assert_eq!(
            layout.roles(),
            &[Cls, Query, Query, Query, Sep, Sos, Doc, Doc, Sos, Doc, Doc]
        );
        assert_eq!(layout.n(), 11);
        assert_eq!(layout.sentence_starts(), &[5, 8]);
        assert_eq!(layout.query_span(), 1..4);
        assert_eq!(layout.sentence_span(1), 8..11);
    }

    #[test]
    fn empty_document() {
        let layout = build_layout(&[7], &[], 16).unwrap();
        assert_eq!(layout.roles(), &[Cls, Query, Sep]);
        assert!(layout.sentence_starts().is_empty());
    }

    #[test]
    fn truncates_tail_sentence() {
        let layout = build_layout(&[10, 11], &[vec![12, 13, 14]], 6).unwrap();
        assert_eq!(layout.roles(), &[Cls, Query, Query, Sep, Sos, Doc]);
        assert_eq!(layout.token_ids(), &[special::CLS, 10, 11, special::SEP, special::SOS, 12]);
    }

    #[test]
    fn drops_bare_sos_on_truncation() {
        // Room for exactly one more token after the first sentence: no lone [SOS].
        let layout = build_layout(&[10], &[vec![12, 13], vec![14]], 7).unwrap();
        assert_eq!(layout.roles(), &[Cls, Query, Sep, Sos, Doc, Doc]);
        assert_eq!(layout.sentence_starts(), &[3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_layout(&[], &[], 10).is_err());
        assert!(build_layout(&[1, 2, 3], &[], 4).is_err());
        assert!(build_layout(&[5], &[vec![]], 10).is_err());
        // Exactly the prefix fits.
        assert_eq!(build_layout(&[5, 6], &[vec![7]], 4).unwrap().n(), 4);
    }

    #[test]
    fn validates_parts() {
        let ids = vec![0; 4];
        assert!(SequenceLayout::from_parts(vec![Query, Cls, Sep, Pad], ids.clone()).is_err());
        assert!(SequenceLayout::from_parts(vec![Cls, Sep, Query, Pad], ids.clone()).is_err());
        assert!(SequenceLayout::from_parts(vec![Cls, Query, Sep, Sos], ids.clone()).is_err());
        assert!(SequenceLayout::from_parts(vec![Cls, Query, Sep, Doc], ids.clone()).is_err());
        assert!(SequenceLayout::from_parts(vec![Cls, Query, Pad, Sep], ids.clone()).is_err());
        let ok = SequenceLayout::from_parts(vec![Cls, Query, Sep, Pad], ids).unwrap();
        assert_eq!(ok.active_len(), 3);
    }

    #[test]
    fn padding_appends_suffix() {
        let layout = build_layout(&[10], &[vec![11]], 8).unwrap().with_padding(7).unwrap();
        assert_eq!(layout.n(), 7);
        assert_eq!(layout.active_len(), 5);
        assert_eq!(layout.role(6), Pad);
        let swapped = layout.with_pad_ids([42, 43]);
        assert_eq!(&swapped.token_ids()[5..], &[42, 43]);
    }
}
