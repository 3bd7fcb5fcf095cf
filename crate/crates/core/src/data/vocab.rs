use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BEGIN: usize = 1;
pub const END: usize = 2;
pub const UNKNOWN: usize = 3;

/// Surface forms of the reserved ids 0..=3.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection with the reserved tokens at ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Assigns ids by descending corpus frequency, ties broken
    /// lexicographically, after the reserved tokens.
    pub fn build<'a, I, C>(corpus: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for caption in corpus {
            for tok in caption {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is a bijection")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Invalid(format!(
                "vocabulary must start with the reserved tokens {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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

    /// Id of `token`, or [`UNKNOWN`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `begin + ids + end`, right-padded to `max_len`.
    ///
    /// Captions with more than `max_len - 2` tokens are rejected rather than
    /// truncated.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 || tokens.len() > max_len - 2 {
            return Err(Error::Caption(format!(
                "caption of {} tokens does not fit max length {max_len}",
                tokens.len()
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BEGIN);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(END);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Tokens of a generated or encoded sequence, skipping `begin`/`pad` and
    /// stopping at the first `end`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .filter(|&id| id != BEGIN && id != PAD)
            .take_while(|&id| id != END)
            .map(|id| self.token(id).unwrap_or(RESERVED[UNKNOWN]).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let corpus = [words("a b"), words("a")];
        let v = Vocabulary::build(corpus.iter());
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        let tied = [words("z y"), words("x")];
        let v = Vocabulary::build(tied.iter());
        assert_eq!(&v.tokens()[4..], &["x", "y", "z"]);
        assert_eq!(v, Vocabulary::build(tied.iter()));
    }

    #[test]
    fn encode_edge_cases() {
        let v = Vocabulary::build([words("a red circle")].iter());
        assert_eq!(v.encode(&[], 5).unwrap(), vec![BEGIN, END, PAD, PAD, PAD]);
        let ids = v.encode(&words("a blue circle"), 6).unwrap();
        assert_eq!(ids[2], UNKNOWN);
        assert!(v.encode(&words("a red circle"), 4).is_err());
        let caption = words("a red circle");
        assert_eq!(v.decode(&v.encode(&caption, 5).unwrap()), caption);
    }

    #[test]
    fn reserved_prefix_is_enforced() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut toks: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        toks.push("a".into());
        toks.push("a".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }
}
