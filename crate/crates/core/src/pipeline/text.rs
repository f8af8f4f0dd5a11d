use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QdstError, Result};
use crate::pattern::special;

/// Lower-cased tokens ending in '.' that do not end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "vs.", "etc.", "e.g.", "i.e.", "inc.", "ltd.",
    "co.", "corp.", "no.", "fig.", "approx.", "dept.", "u.s.", "jan.", "feb.", "mar.", "apr.", "aug.", "sept.",
    "sep.", "oct.", "nov.", "dec.",
];

/// Splits on `.`, `?` or `!` followed by whitespace or end of text, except
/// after a known abbreviation. Empty pieces are dropped; text without a
/// terminator is a single sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(pos, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let end = pos + c.len_utf8();
        let boundary = chars.get(k + 1).is_none_or(|&(_, next)| next.is_whitespace());
        if !boundary {
            continue;
        }
        if c == '.' {
            let word_start = text[..pos].rfind(char::is_whitespace).map_or(0, |w| w + 1);
            let word = text[word_start.max(start)..end].to_lowercase();
            if ABBREVIATIONS.contains(&word.as_str()) {
                continue;
            }
        }
        push_trimmed(&mut out, &text[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// Lower-cased alphanumeric runs.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Token to id mapping with the reserved ids from [`special`] pinned at the front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

const RESERVED_TOKENS: [&str; special::RESERVED as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[SOS]"];

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(id) = self.index.get(token) {
            return *id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.tokens).expect("vocabulary serialises");
        std::fs::write(path, json).map_err(|e| QdstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QdstError::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| QdstError::ParseError {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS {
            return Err(QdstError::invalid(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(QdstError::invalid(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }
}

/// Lower-cases and splits on non-alphanumerics. In build mode unseen words
/// are added to `vocab`; otherwise they map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &mut Vocabulary, build_mode: bool) -> Vec<u32> {
    words(text)
        .map(|w| {
            if build_mode {
                vocab.insert(&w)
            } else {
                vocab.id(&w).unwrap_or(special::UNK)
            }
        })
        .collect()
}

/// Frozen-vocabulary tokenisation.
pub fn tokenize_frozen(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    words(text).map(|w| vocab.id(&w).unwrap_or(special::UNK)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_terminators() {
        assert_eq!(split_sentences("A. B? C!"), vec!["A.", "B?", "C!"]);
        assert_eq!(split_sentences("no terminator"), vec!["no terminator"]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn abbreviations_and_inner_dots() {
        assert_eq!(
            split_sentences("Dr. Gray sailed in 1792. He found the river, e.g. the Columbia."),
            vec!["Dr. Gray sailed in 1792.", "He found the river, e.g. the Columbia."]
        );
        assert_eq!(split_sentences("Version 3.5 shipped. Done"), vec!["Version 3.5 shipped.", "Done"]);
        assert_eq!(split_sentences("Wait... what?!"), vec!["Wait...", "what?!"]);
    }

    #[test]
    fn tokenize_build_and_frozen() {
        let mut vocab = Vocabulary::new();
        let ids = tokenize("Robert Gray", &mut vocab, true);
        assert_eq!(ids.len(), 2);
        assert_eq!(vocab.token(ids[0]), Some("robert"));
        assert_eq!(vocab.token(ids[1]), Some("gray"));
        assert_eq!(tokenize("robert, GRAY!", &mut vocab, false), ids);
        assert_eq!(tokenize("columbia", &mut vocab, false), vec![special::UNK]);
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("[PAD]"), Some(special::PAD));
        assert_eq!(v.id("[CLS]"), Some(special::CLS));
        assert_eq!(v.id("[SEP]"), Some(special::SEP));
        assert_eq!(v.id("[SOS]"), Some(special::SOS));
        assert_eq!(v.id("[UNK]"), Some(special::UNK));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let mut v = Vocabulary::new();
        tokenize("alpha beta gamma", &mut v, true);
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.id("beta"), v.id("beta"));
        assert_eq!(back.len(), v.len());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(words in proptest::collection::vec("[a-z0-9]{1,8}", 1..12)) {
            let mut vocab = Vocabulary::new();
            let ids = tokenize(&words.join(" "), &mut vocab, true);
            let rejoined: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
            prop_assert_eq!(tokenize(&rejoined.join(" "), &mut vocab, false), ids);
        }
    }
}
