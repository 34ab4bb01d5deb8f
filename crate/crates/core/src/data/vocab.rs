use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const START: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

/// Bijective token/index map. Indices 0, 1 and 2 are the start, end and
/// unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized captions, keeping tokens seen at
    /// least `min_count` times plus every entry of `always` regardless of
    /// frequency. Order: reserved tokens, then frequency descending, then
    /// lexicographic.
    pub fn build<'a, I>(captions: I, min_count: usize, always: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for caption in captions {
            for tok in caption {
                any = true;
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_count && !RESERVED.contains(t))
            .map(|(&t, &c)| (t, c))
            .collect();
        for w in always {
            if !RESERVED.contains(&w.as_str()) && !kept.iter().any(|(t, _)| t == w) {
                kept.push((w.as_str(), counts.get(w.as_str()).copied().unwrap_or(0)));
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Data(format!(
                "vocabulary needs at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens[..3] != RESERVED {
            return Err(Error::Data("reserved tokens must occupy indices 0..3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty token at index {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Start token, word indices (unknown words map to `<unk>`), end token.
    pub fn encode(&self, caption: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(caption.len() + 2);
        out.push(START);
        out.extend(caption.iter().map(|t| self.id(t).unwrap_or(UNK)));
        out.push(END);
        out
    }

    /// Maps indices back to tokens, dropping start/end markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != START && i != END)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_owned())
            .collect()
    }

    /// SHA-256 over the ordered token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Classes and their classwords. A class label is its classword token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClasswordRegistry {
    classwords: Vec<String>,
}

impl ClasswordRegistry {
    pub fn new(classwords: Vec<String>) -> Result<Self> {
        for (i, c) in classwords.iter().enumerate() {
            if c.is_empty() || c.split_whitespace().count() != 1 {
                return Err(Error::Data(format!("classword `{c}` must be a single token")));
            }
            if classwords[..i].contains(c) {
                return Err(Error::Data(format!("duplicate classword `{c}`")));
            }
        }
        Ok(ClasswordRegistry { classwords })
    }

    pub fn len(&self) -> usize {
        self.classwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classwords.is_empty()
    }

    pub fn classwords(&self) -> &[String] {
        &self.classwords
    }

    /// Position of `class` in the registry, i.e. its one-hot target index.
    pub fn position(&self, class: &str) -> Result<usize> {
        self.classwords
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::UnknownClass(class.to_owned()))
    }

    /// Vocabulary index of every classword, in registry order.
    pub fn vocab_indices(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.classwords
            .iter()
            .map(|c| {
                vocab
                    .id(c)
                    .ok_or_else(|| Error::Data(format!("classword `{c}` missing from vocabulary")))
            })
            .collect()
    }

    /// Length-|V| vector with a one at every classword index.
    pub fn mask(&self, vocab: &Vocabulary) -> Result<Vec<f64>> {
        let mut k = vec![0.0; vocab.len()];
        for i in self.vocab_indices(vocab)? {
            k[i] = 1.0;
        }
        Ok(k)
    }
}
