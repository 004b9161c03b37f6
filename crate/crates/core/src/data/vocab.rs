use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    /// Unknown tokens map to `<unk>`.
    Frozen,
    /// Unknown tokens get fresh ids appended after the existing ones.
    Extend,
}

/// Token ↔ id map. Ids `0..3` are reserved for pad, unk and the pair separator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::from_tokens([PAD, UNK, SEP].map(String::from).to_vec())
            .expect("reserved tokens are distinct")
    }

    /// Rebuilds a vocabulary from tokens listed in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        if tokens.len() < 3
            || tokens[PAD_ID] != PAD
            || tokens[UNK_ID] != UNK
            || tokens[SEP_ID] != SEP
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
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

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Appends `new_tokens`, which must be absent from the vocabulary and
    /// distinct from each other. Returns their ids.
    pub fn extend<S: AsRef<str>>(&mut self, new_tokens: &[S]) -> Result<Vec<usize>> {
        let mut seen = std::collections::HashSet::new();
        for t in new_tokens {
            let t = t.as_ref();
            if self.contains(t) || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(new_tokens.iter().map(|t| self.push(t.as_ref())).collect())
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn encode<S: AsRef<str>>(&mut self, tokens: &[S], mode: VocabMode) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                match (self.id(t), mode) {
                    (Some(id), _) => id,
                    (None, VocabMode::Frozen) => UNK_ID,
                    (None, VocabMode::Extend) => self.push(t),
                }
            })
            .collect()
    }

    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Tokens from `candidates` not yet in the vocabulary, first occurrence order.
    pub fn unseen<'a, I: IntoIterator<Item = &'a str>>(&self, candidates: I) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        candidates
            .into_iter()
            .filter(|t| !self.contains(t) && seen.insert(*t))
            .map(String::from)
            .collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}
