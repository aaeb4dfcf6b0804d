//! Whitespace-and-punctuation tokenizer with a corpus-built vocabulary.
//!
//! Deliberately simple: lowercased alphanumeric runs, everything else is a
//! separator. The interface isolates tokenization so a subword tokenizer
//! could replace it without touching the encoders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercased word split: maximal alphanumeric runs, punctuation dropped.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
    min_freq: usize,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// Never true: the reserved tokens are always present.
    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    fn from_tokens(id_to_token: Vec<String>, min_freq: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
            min_freq,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&SavedVocab {
            tokens: &self.id_to_token,
            min_freq: self.min_freq,
        })
        .map_err(|e| Error::data(format!("vocab serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: cannot read vocab: {e}", path.display())))?;
        let saved: OwnedSavedVocab = serde_json::from_str(&raw)
            .map_err(|e| Error::data(format!("{}: bad vocab file: {e}", path.display())))?;
        for (i, reserved) in RESERVED.iter().enumerate() {
            if saved.tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::data(format!(
                    "{}: reserved token {i} must be {reserved}",
                    path.display()
                )));
            }
        }
        Ok(Vocab::from_tokens(saved.tokens, saved.min_freq))
    }
}

#[derive(Serialize)]
struct SavedVocab<'a> {
    tokens: &'a [String],
    min_freq: usize,
}

#[derive(Deserialize)]
struct OwnedSavedVocab {
    tokens: Vec<String>,
    min_freq: usize,
}

/// Build a vocabulary from a text corpus: tokens with frequency at least
/// `min_freq`, ids assigned in lexicographic order after the reserved
/// four, so the result is independent of corpus order.
pub fn build_vocab<I, T>(corpus: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut saw_any = false;
    for line in corpus {
        for word in split_words(line.as_ref()) {
            saw_any = true;
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(Error::data("cannot build a vocabulary from an empty corpus"));
    }

    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    // BTreeMap iteration is already lexicographic.
    for (token, count) in counts {
        if count >= min_freq {
            id_to_token.push(token);
        }
    }
    Ok(Vocab::from_tokens(id_to_token, min_freq))
}

/// Token ids with an attention mask (true on real tokens, false on `[PAD]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn empty() -> Self {
        TokenSeq {
            ids: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with `[PAD]` (mask false) up to `len`.
    pub fn pad_to(&self, len: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        while ids.len() < len {
            ids.push(PAD_ID);
            mask.push(false);
        }
        TokenSeq { ids, mask }
    }
}

/// Tokenize into ids, mapping unknown words to `[UNK]` and truncating to
/// `max_len`. No `[CLS]`/`[SEP]` are added here; the joint-input builder owns
/// sequence framing.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let ids: Vec<usize> = split_words(text)
        .into_iter()
        .take(max_len)
        .map(|w| vocab.id(&w))
        .collect();
    let mask = vec![true; ids.len()];
    TokenSeq { ids, mask }
}
