//! Word-level vocabulary built from corpus token frequencies.

use std::collections::HashMap;

use crate::corpus::text::{detokenize, tokenize, SEPARATOR};
use crate::corpus::PaperRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", SEPARATOR, "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by corpus tokens in order of decreasing frequency
    /// (ties broken lexicographically), capped at `max_size` entries in total.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::InvalidArgument(format!("vocab size {max_size} leaves no room for words")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("token list does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("token `{t}` appears twice")));
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids of `text`; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Text of `ids`, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect();
        detokenize(&words)
    }

    /// True for `.`, `!`, `?` and the separator.
    pub fn is_boundary(&self, id: usize) -> bool {
        id == SEP || matches!(self.token(id), Some("." | "!" | "?"))
    }

    /// The last `max_tokens` tokens of a paper's title followed by its abstract.
    pub fn paper_context(&self, paper: &PaperRecord, max_tokens: usize) -> Vec<usize> {
        let mut ids = self.encode(&paper.title);
        ids.extend(self.encode(&paper.abstract_text));
        let start = ids.len().saturating_sub(max_tokens);
        ids.split_off(start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_bijection() {
        let v = Vocab::build(&["b a a c .", "a b"], 100).unwrap();
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.id(SEPARATOR), Some(SEP));
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
        assert_eq!(v.encode("a zzz"), vec![5, UNK]);
        assert_eq!(v.decode(&[BOS, 5, 6, 7, EOS]), "a b.");
    }

    #[test]
    fn cap_and_reload() {
        let v = Vocab::build(&["x y z w"], 7).unwrap();
        assert_eq!(v.len(), 7);
        let back = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }
}
