use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

/// Reserved token strings, in id order. These ids never change.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token string to id map with fixed reserved slots `0..RESERVED.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in the given order.
    /// Duplicates and reserved strings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let n = tokens.len();
        let v = Self::from_tokens(tokens.into_iter().skip(RESERVED.len()));
        if v.len() != n {
            return Err("vocabulary contains duplicate tokens".into());
        }
        Ok(v)
    }
}

/// Builds a vocabulary from whitespace-tokenized texts, keeping tokens seen at
/// least `min_freq` times. Corpus tokens are ordered lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in corpus {
        for tok in text.split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    Vocabulary::from_tokens(
        counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
            .map(|(t, _)| t),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_frequency_filters_rare_tokens() {
        let v = build_vocab(["a a b"], 2);
        assert!(v.get("a").is_some());
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn mask_slot_is_fixed() {
        let a = build_vocab(["x y z"], 1);
        let b = build_vocab(["completely different words"], 1);
        assert_eq!(a.id("[MASK]"), MASK);
        assert_eq!(b.id("[MASK]"), MASK);
    }

    #[test]
    fn distinct_tokens_counted_once() {
        let text: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let joined = text.join(" ");
        let v = build_vocab([joined.as_str()], 1);
        assert_eq!(v.len(), 100 + RESERVED.len());
    }

    #[test]
    fn reserved_strings_in_corpus_keep_reserved_ids() {
        let v = build_vocab(["[SEP] a [SEP]"], 1);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.len(), RESERVED.len() + 1);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(["b a c"], 1);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("c"), v.id("c"));
    }
}
