use std::collections::HashMap;

use crate::error::{Error, Result};

pub const OOV_TOKEN: &str = "<unk>";
pub const OOV_INDEX: usize = 0;

/// Ordered token list with the out-of-vocabulary token reserved at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens`, which must not contain duplicates.
    /// The OOV token is prepended unless it is already first.
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut rest = tokens.into_iter().peekable();
        if rest.peek().is_some_and(|t| t == OOV_TOKEN) {
            rest.next();
        }
        let mut all = vec![OOV_TOKEN.to_string()];
        all.extend(rest);
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Collects every word appearing in `texts`, in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        words.retain(|w| w != OOV_TOKEN);
        Vocabulary::new(words).expect("deduplicated words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_INDEX)
    }

    /// One token per line, OOV first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Token indices for one text, already truncated.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '<' && c != '>'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Lowercases, splits on whitespace and punctuation, maps words to indices
/// and truncates to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSeq {
    TokenSeq {
        ids: split_words(text).take(max_len).map(|w| vocab.lookup(&w)).collect(),
    }
}
