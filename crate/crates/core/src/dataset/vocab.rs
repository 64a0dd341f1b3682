use std::collections::{BTreeMap, HashMap};

use super::Caption;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased whitespace tokenization shared by captions and metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Bidirectional word/id table with reserved ids for PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in tokenize(c.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect())
    }

    /// Rebuilds a vocabulary from its non-reserved words in id order.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut ids = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words: all, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Caption {
        let mut tokens = vec![BOS];
        tokens.extend(tokenize(text).iter().map(|w| self.id(w)));
        tokens.push(EOS);
        Caption {
            tokens,
            raw: text.to_string(),
        }
    }

    /// Words for `ids`, skipping PAD/BOS/EOS and stopping at the first EOS.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_words(ids).join(" ")
    }

    /// Display form of a single token, including reserved ones.
    pub fn token_str(&self, id: usize) -> &str {
        self.word(id).unwrap_or(RESERVED[UNK])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build(&["a a b"]).unwrap();
        assert!(v.id("a") < v.id("b"));
        let v = Vocab::build(&["zeta beta alpha", "beta"]).unwrap();
        assert_eq!(v.words(), &["beta", "alpha", "zeta"]);
    }

    #[test]
    fn deterministic() {
        let c = ["a person walks then sits", "a person jumps"];
        assert_eq!(Vocab::build(&c).unwrap(), Vocab::build(&c).unwrap());
    }

    #[test]
    fn unseen_word_is_unk() {
        let v = Vocab::build(&["a b"]).unwrap();
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("a zzz").tokens, vec![BOS, v.id("a"), UNK, EOS]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::build(&["a person walks forward"]).unwrap();
        let c = v.encode("A person walks forward");
        assert_eq!(c.tokens[0], BOS);
        assert_eq!(*c.tokens.last().unwrap(), EOS);
        assert_eq!(v.decode(&c.tokens), "a person walks forward");
        assert!(c.tokens.iter().all(|&t| t < v.len()));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocab::build::<&str>(&[]).is_err());
    }
}
