//! A word-level tokenizer for small corpora.

use std::collections::HashMap;

use crate::tokens::{CLS, RESERVED, UNK};

/// Lowercased words, split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

/// Word table with the reserved ids in front; content ids start at
/// [`RESERVED`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `max_words` most frequent words (ties broken
    /// lexicographically).
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_words);
        Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    pub fn from_words(list: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab::default();
        for w in list {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), RESERVED + v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        RESERVED as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        id.checked_sub(RESERVED).and_then(|i| self.words.get(i as usize)).map(String::as_str)
    }
}

/// `[CLS]` followed by at most `max_tokens − 1` word ids.
pub fn tokenize_text(text: &str, vocab: &Vocab, max_tokens: usize) -> Vec<u32> {
    std::iter::once(CLS)
        .chain(words(text).map(|w| vocab.id(&w)).take(max_tokens.saturating_sub(1)))
        .collect()
}
