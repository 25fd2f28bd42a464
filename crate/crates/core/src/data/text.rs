//! Textualisation of clinical fields and a word-level tokenizer.
//!
//! Each present field becomes one sentence `"The {label} is {value}."`, in
//! the fixed order age, gender, education, hand, MMSE, CDR, logical memory,
//! followed by the narrative cut to its first 40 words. Absent fields
//! contribute nothing.
//!
//! | field          | sentence                              |
//! |----------------|---------------------------------------|
//! | age            | `The age is 71.`                      |
//! | gender         | `The gender is female.`               |
//! | education      | `The education level is 16.`          |
//! | hand           | `The dominant hand is right.`         |
//! | mmse           | `The MMSE score is 29.`               |
//! | cdr            | `The CDR is 0.5.`                     |
//! | logical_memory | `The logical memory score is 12.`     |

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::record::ClinicalFields;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

pub const MAX_NARRATIVE_WORDS: usize = 40;

/// Field labels used in `"The {label} is {value}."`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub age: String,
    pub gender: String,
    pub education: String,
    pub hand: String,
    pub mmse: String,
    pub cdr: String,
    pub logical_memory: String,
    pub max_narrative_words: usize,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            age: "age".into(),
            gender: "gender".into(),
            education: "education level".into(),
            hand: "dominant hand".into(),
            mmse: "MMSE score".into(),
            cdr: "CDR".into(),
            logical_memory: "logical memory score".into(),
            max_narrative_words: MAX_NARRATIVE_WORDS,
        }
    }
}

fn sentence(label: &str, value: impl std::fmt::Display) -> String {
    format!("The {label} is {value}.")
}

pub fn textualize_record(fields: &ClinicalFields, templates: &TemplateSet) -> String {
    let d = &fields.demographics;
    let l = &fields.lab_results;
    let mut parts: Vec<String> = Vec::new();
    if let Some(v) = d.age {
        parts.push(sentence(&templates.age, v));
    }
    if let Some(v) = &d.gender {
        parts.push(sentence(&templates.gender, v));
    }
    if let Some(v) = d.education {
        parts.push(sentence(&templates.education, v));
    }
    if let Some(v) = &d.hand {
        parts.push(sentence(&templates.hand, v));
    }
    if let Some(v) = l.mmse {
        parts.push(sentence(&templates.mmse, v));
    }
    if let Some(v) = l.cdr {
        parts.push(sentence(&templates.cdr, v));
    }
    if let Some(v) = l.logical_memory {
        parts.push(sentence(&templates.logical_memory, v));
    }
    if let Some(n) = &fields.narrative {
        let n = truncate_narrative(n, templates.max_narrative_words);
        if !n.trim().is_empty() {
            parts.push(n.trim().to_string());
        }
    }
    parts.join(" ")
}

/// Keeps the first `max_words` whitespace-delimited words. Text that is
/// already short enough is returned unchanged.
pub fn truncate_narrative(text: &str, max_words: usize) -> String {
    let mut seen = 0;
    let mut in_word = false;
    for (pos, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_word && seen == max_words {
                return text[..pos].to_string();
            }
            in_word = false;
        } else if !in_word {
            in_word = true;
            seen += 1;
            if seen > max_words {
                return text[..pos].trim_end().to_string();
            }
        }
    }
    text.to_string()
}

/// Lowercased word tokens: whitespace split with surrounding punctuation
/// stripped, so `"0.5."` yields `"0.5"`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocab {
    /// Tokens with count `>= min_freq`, ordered by descending count and then
    /// lexicographically, with ids starting after the reserved block.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str())).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w)).collect();
        Vocab::from_tokens(tokens).expect("distinct tokens")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fixed-length token ids with `[CLS]` first and zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `true` for real tokens, including `[CLS]`.
    pub pad_mask: Vec<bool>,
    pub length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// `[CLS]` followed by word ids (OOV as `[UNK]`), truncated to `max_len`
/// and padded with `[PAD]`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "sequence must have room for [CLS]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(words(text).iter().take(max_len - 1).map(|w| vocab.id(w).unwrap_or(UNK_ID)));
    let length = ids.len();
    ids.resize(max_len, PAD_ID);
    let pad_mask = (0..max_len).map(|i| i < length).collect();
    TokenSequence { ids, pad_mask, length }
}
