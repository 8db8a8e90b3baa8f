//! Word-level vocabulary with reserved control tokens.

use std::collections::{BTreeSet, HashMap};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN, MASK_TOKEN];

/// Token to id mapping. Non-reserved entries are stored sorted, so a
/// vocabulary rebuilt from the same corpus is identical regardless of
/// iteration order at the call site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Collect the distinct tokens of a corpus. Reserved names occurring in
    /// the input are ignored; they always keep their fixed ids.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let uniq: BTreeSet<&str> = corpus
            .into_iter()
            .filter(|t| !RESERVED.contains(t) && !t.is_empty())
            .collect();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(uniq.into_iter().map(String::from));
        Self::from_token_list(tokens).expect("construction is deduplicated")
    }

    /// Rebuild from a serialized token list (checkpoint loading). The list
    /// must start with the four reserved tokens and contain no duplicates.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || RESERVED.iter().zip(&tokens).any(|(r, t)| r != t)
        {
            return Err(Error::Data(
                "vocabulary must start with [PAD], [UNK], [SEP], [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of ordinary (non-reserved) tokens, for random replacement draws.
    pub fn first_ordinary_id(&self) -> usize {
        RESERVED.len()
    }
}
