//! Word-level vocabulary and fixed-length token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_text, StudyRecord, SEP_TEXT};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on every character outside `[a-z0-9-]`, so
/// hyphenated terms such as `anti-pd-1` stay whole. Pieces made only of
/// hyphens are dropped.
pub fn word_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-'))
        .filter(|w| !w.is_empty() && !w.chars().all(|c| c == '-'))
        .map(str::to_owned)
        .collect()
}

/// Token segments of an assembled text; the literal `[SEP]` marks boundaries.
fn segments(text: &str) -> Vec<Vec<String>> {
    text.split(SEP_TEXT).map(word_tokens).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens: f.tokens,
            index,
            min_frequency: f.min_frequency,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_frequency: v.min_frequency,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from a token list whose first four entries are the
    /// reserved markers.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let v = Vocabulary::from(VocabFile { min_frequency, tokens });
        if v.index.len() != v.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Counts word tokens over the assembled text of every record; tokens seen at
/// least `min_frequency` times get ids from 4 upward in order of descending
/// frequency, ties broken alphabetically.
pub fn build_vocab(corpus: &[StudyRecord], min_frequency: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    if min_frequency == 0 {
        return Err(Error::Invalid("min_frequency must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in corpus {
        for seg in segments(&assemble_text(r)?) {
            for w in seg {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_frequency && !RESERVED.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens, min_frequency)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Number of non-padding positions.
    pub length: usize,
}

/// `[CLS] tokens… [SEP]`, truncated so the final `[SEP]` always survives, then
/// padded with `[PAD]` to exactly `max_len`. Literal `[SEP]` markers in the
/// text map to the separator id.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Invalid(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = vec![CLS];
    for (i, seg) in segments(text).into_iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(seg.iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    }
    ids.truncate(max_len - 1);
    ids.push(SEP);
    let length = ids.len();
    ids.resize(max_len, PAD);
    let attention_mask = (0..max_len).map(|i| u8::from(i < length)).collect();
    Ok(TokenSequence {
        ids,
        attention_mask,
        length,
    })
}

pub fn tokenize_record(record: &StudyRecord, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    tokenize(&assemble_text(record)?, vocab, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> Vec<StudyRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| StudyRecord::new(format!("r{i}"), *t, "", ""))
            .collect()
    }

    #[test]
    fn keeps_hyphenated_terms() {
        assert_eq!(word_tokens("Anti-PD-1 (nivolumab), CTLA-4!"), vec!["anti-pd-1", "nivolumab", "ctla-4"]);
        assert_eq!(word_tokens(" - -- x"), vec!["x"]);
    }

    #[test]
    fn frequency_threshold() {
        let v = build_vocab(&corpus(&["a a b"]), 2).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.id("a"), Some(4));
    }

    #[test]
    fn tie_break_is_alphabetical() {
        // "x" and "y" both occur twice.
        let v = build_vocab(&corpus(&["x y", "y x"]), 1).unwrap();
        assert_eq!(v.id("x"), Some(4));
        assert_eq!(v.id("y"), Some(5));
        let v2 = build_vocab(&corpus(&["y z z", "y x z"]), 1).unwrap();
        assert_eq!(v2.tokens()[4..], ["z", "y", "x"]);
    }

    #[test]
    fn deterministic_rebuild() {
        let c = corpus(&["alpha beta", "beta gamma gamma"]);
        assert_eq!(build_vocab(&c, 1).unwrap(), build_vocab(&c, 1).unwrap());
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn empty_text() {
        let v = build_vocab(&corpus(&["a"]), 1).unwrap();
        let t = tokenize("", &v, 5).unwrap();
        assert_eq!(t.ids, vec![CLS, SEP, PAD, PAD, PAD]);
        assert_eq!(t.length, 2);
        assert_eq!(t.attention_mask, vec![1, 1, 0, 0, 0]);
    }

    #[test]
    fn truncation_keeps_sep() {
        let v = build_vocab(&corpus(&["w"]), 1).unwrap();
        let long = vec!["w"; 1000].join(" ");
        let t = tokenize(&long, &v, 16).unwrap();
        assert_eq!(t.ids.len(), 16);
        assert_eq!(t.ids[15], SEP);
        assert_eq!(t.length, 16);
        assert!(tokenize("w", &v, 1).is_err());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = build_vocab(&corpus(&["known"]), 1).unwrap();
        let t = tokenize("zzz-unseen", &v, 8).unwrap();
        assert!(t.ids.contains(&UNK));
    }

    #[test]
    fn separator_literal_maps_to_sep_id() {
        let v = build_vocab(&corpus(&["a b"]), 1).unwrap();
        let r = StudyRecord::new("x", "a", "b", "");
        let t = tokenize_record(&r, &v, 8).unwrap();
        assert_eq!(&t.ids[..5], &[CLS, v.id("a").unwrap(), SEP, v.id("b").unwrap(), SEP]);
        assert!(v.id("sep").is_none());
    }

    proptest! {
        #[test]
        fn mask_matches_length(words in proptest::collection::vec("[a-d]{1,3}", 0..40), max_len in 2usize..24) {
            let v = build_vocab(&corpus(&["a b c d ab"]), 1).unwrap();
            let t = tokenize(&words.join(" "), &v, max_len).unwrap();
            prop_assert_eq!(t.ids.len(), max_len);
            prop_assert_eq!(t.attention_mask.iter().filter(|&&m| m == 1).count(), t.length);
            prop_assert!(t.ids[t.length..].iter().all(|&i| i == PAD));
            prop_assert_eq!(t.ids[0], CLS);
            prop_assert_eq!(t.ids[t.length - 1], SEP);
        }

        #[test]
        fn vocab_is_permutation_invariant(mut texts in proptest::collection::vec("[a-e ]{1,12}", 1..8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            texts.retain(|t| !t.trim().is_empty());
            prop_assume!(!texts.is_empty());
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let original = build_vocab(&corpus(&refs), 1).unwrap();
            let mut shuffled = refs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(original, build_vocab(&corpus(&shuffled), 1).unwrap());
        }
    }
}
