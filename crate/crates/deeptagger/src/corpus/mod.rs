//! Data model for query tagging: label schemes, examples, tokenization,
//! title augmentation, MLM masking, label corruption, dataset I/O, and a
//! synthetic corpus generator.

mod encode;
mod generate;
mod io;
mod vocab;

pub use encode::{
    augment_with_titles, corrupt_labels, encode_batch, mask_for_mlm, repair_bio,
    AugmentedSequence, EncodedBatch, MaskedTokens,
};
pub use generate::{
    domain_rules, generate_synthetic_corpus, DomainRules, GeneratorConfig, SyntheticCorpus,
};
pub use io::{read_conll, read_jsonl, write_conll, write_jsonl};
pub use vocab::{Vocabulary, MASK_ID, PAD_ID, SEP_ID, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::eval::extract_spans;
use crate::{Error, Result};

/// Entity categories plus the BIO tag layout derived from them.
///
/// Tag ids: 0 is `O`; category `c` owns `B-` at `1 + 2c` and `I-` at
/// `2 + 2c`. Tokens outside every entity (the "other" class) carry `O`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    categories: Vec<String>,
}

impl LabelScheme {
    pub fn new(categories: Vec<String>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Config("label scheme needs at least one category".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.is_empty() || c == "O" {
                return Err(Error::Config(format!("invalid category name {c:?}")));
            }
            if categories[..i].contains(c) {
                return Err(Error::Config(format!("duplicate category {c:?}")));
            }
        }
        Ok(LabelScheme { categories })
    }

    /// The scheme used by the synthetic corpus.
    pub fn default_synthetic() -> Self {
        LabelScheme::new(
            ["Brand", "Product", "Location", "Attribute"].map(String::from).to_vec(),
        )
        .expect("static scheme is valid")
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Total tag count: `O` plus `B-`/`I-` per category.
    pub fn num_tags(&self) -> usize {
        1 + 2 * self.categories.len()
    }

    pub fn tag_name(&self, id: usize) -> Result<String> {
        if id == 0 {
            return Ok("O".to_string());
        }
        let cat = (id - 1) / 2;
        let name = self
            .categories
            .get(cat)
            .ok_or_else(|| Error::Data(format!("tag id {id} out of range")))?;
        Ok(if id % 2 == 1 { format!("B-{name}") } else { format!("I-{name}") })
    }

    pub fn tag_id(&self, tag: &str) -> Result<usize> {
        if tag == "O" {
            return Ok(0);
        }
        let (prefix, label) = tag
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("malformed BIO tag {tag:?}")))?;
        let cat = self
            .categories
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Data(format!("tag {tag:?} names an unknown category")))?;
        match prefix {
            "B" => Ok(1 + 2 * cat),
            "I" => Ok(2 + 2 * cat),
            _ => Err(Error::Data(format!("malformed BIO tag {tag:?}"))),
        }
    }

    pub fn tag_names(&self) -> Vec<String> {
        (0..self.num_tags()).map(|id| self.tag_name(id).expect("in range")).collect()
    }
}

/// Annotation reliability tier of an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Strong,
    Weak,
    Unlabeled,
}

/// Where an example's annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Crowd,
    Llm,
    Synthetic,
}

/// A query with optional search-result titles and optional BIO tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryExample {
    pub query: Vec<String>,
    pub titles: Vec<Vec<String>>,
    pub tags: Option<Vec<String>>,
    pub quality: Quality,
    pub source: Source,
}

impl QueryExample {
    /// Validates tag alignment and BIO well-formedness.
    pub fn new(
        query: Vec<String>,
        titles: Vec<Vec<String>>,
        tags: Option<Vec<String>>,
        quality: Quality,
        source: Source,
    ) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::Data("example has an empty query".into()));
        }
        if let Some(tags) = &tags {
            if tags.len() != query.len() {
                return Err(Error::Data(format!(
                    "{} tags for {} query tokens",
                    tags.len(),
                    query.len()
                )));
            }
            extract_spans(tags)?;
        }
        Ok(QueryExample { query, titles, tags, quality, source })
    }

    pub fn unlabeled(query: Vec<String>, titles: Vec<Vec<String>>) -> Result<Self> {
        QueryExample::new(query, titles, None, Quality::Unlabeled, Source::Synthetic)
    }

    /// Tags, or an error for unlabeled examples.
    pub fn tags(&self) -> Result<&[String]> {
        self.tags
            .as_deref()
            .ok_or_else(|| Error::Data("example has no tags".into()))
    }
}

/// Lowercase, split on whitespace, and detach punctuation into separate
/// tokens. Empty input yields an empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}
