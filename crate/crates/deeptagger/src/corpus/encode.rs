//! Sequence construction: title augmentation, MLM masking, label noise,
//! and padded batch encoding.

use super::vocab::{Vocabulary, MASK_ID, PAD_ID, SEP_TOKEN};
use super::{LabelScheme, QueryExample};
use crate::tensor::Rng;
use crate::{Error, Result};

/// A query joined with its first `k` titles, `[SEP]`-separated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSequence {
    pub tokens: Vec<String>,
    /// True exactly at query-token positions; separators, titles, and
    /// anything truncated away never receive supervision.
    pub loss_mask: Vec<bool>,
    /// 0 for query tokens, 1 for `[SEP]`s and title tokens.
    pub segment_ids: Vec<usize>,
}

/// Build `query [SEP] title1 [SEP] title2 ...` using the first `k` titles
/// in their given order, truncated from the right to `max_seq_len`.
pub fn augment_with_titles(example: &QueryExample, k: usize, max_seq_len: usize) -> AugmentedSequence {
    let mut tokens = Vec::new();
    let mut loss_mask = Vec::new();
    let mut segment_ids = Vec::new();
    for t in &example.query {
        tokens.push(t.clone());
        loss_mask.push(true);
        segment_ids.push(0);
    }
    for title in example.titles.iter().take(k) {
        tokens.push(SEP_TOKEN.to_string());
        loss_mask.push(false);
        segment_ids.push(1);
        for t in title {
            tokens.push(t.clone());
            loss_mask.push(false);
            segment_ids.push(1);
        }
    }
    tokens.truncate(max_seq_len);
    loss_mask.truncate(max_seq_len);
    segment_ids.truncate(max_seq_len);
    AugmentedSequence { tokens, loss_mask, segment_ids }
}

/// Token ids with MLM corruption applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTokens {
    pub input_ids: Vec<usize>,
    /// Original ids at the selected positions, aligned with `positions`.
    pub target_ids: Vec<usize>,
    pub positions: Vec<usize>,
}

/// Select each position with probability `rate`; replace 80% of selected
/// tokens with `[MASK]`, 10% with a random ordinary token, and leave 10%
/// unchanged. If nothing is selected, one position is forced uniformly so
/// every sequence contributes a target.
pub fn mask_for_mlm(ids: &[usize], vocab: &Vocabulary, rate: f64, rng: &mut Rng) -> MaskedTokens {
    assert!(!ids.is_empty(), "mask_for_mlm needs at least one token");
    let mut input_ids = ids.to_vec();
    let mut positions: Vec<usize> = (0..ids.len()).filter(|_| rng.chance(rate)).collect();
    if positions.is_empty() {
        positions.push(rng.below(ids.len()));
    }
    let mut target_ids = Vec::with_capacity(positions.len());
    let ordinary = vocab.first_ordinary_id()..vocab.len();
    for &p in &positions {
        target_ids.push(ids[p]);
        let roll = rng.uniform();
        if roll < 0.8 {
            input_ids[p] = MASK_ID;
        } else if roll < 0.9 && ordinary.len() > 0 {
            input_ids[p] = ordinary.start + rng.below(ordinary.len());
        }
    }
    MaskedTokens { input_ids, target_ids, positions }
}

/// Flip each labeled token's category to a uniformly random different one
/// with probability `noise_rate`, then repair the BIO sequence (an `I-X`
/// left without a head becomes `B-X`). `O` tokens are never touched.
pub fn corrupt_labels(
    tags: &[String],
    scheme: &LabelScheme,
    noise_rate: f64,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Config(format!("noise rate {noise_rate} outside [0, 1]")));
    }
    let cats = scheme.categories();
    let mut out = Vec::with_capacity(tags.len());
    for tag in tags {
        scheme.tag_id(tag)?;
        let flip = tag != "O" && cats.len() > 1 && rng.chance(noise_rate);
        if !flip {
            out.push(tag.clone());
            continue;
        }
        let (prefix, label) = tag.split_once('-').expect("non-O tag is B-X or I-X");
        let others: Vec<&String> = cats.iter().filter(|c| c.as_str() != label).collect();
        out.push(format!("{prefix}-{}", others[rng.below(others.len())]));
    }
    Ok(repair_bio(&out))
}

/// Promote orphan `I-X` tags (start of sequence, after `O`, or after a
/// different category) to `B-X`.
pub fn repair_bio(tags: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev_label: Option<&str> = None;
    for tag in tags {
        if let Some(label) = tag.strip_prefix("I-") {
            if prev_label != Some(label) {
                out.push(format!("B-{label}"));
                prev_label = Some(label);
                continue;
            }
        }
        prev_label = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"));
        out.push(tag.clone());
    }
    out
}

/// A padded batch ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    /// `[batch][len]` token ids, `[PAD]` on the right.
    pub token_ids: Vec<Vec<usize>>,
    /// True at real positions, false at padding.
    pub pad_mask: Vec<Vec<bool>>,
    pub segment_ids: Vec<Vec<usize>>,
    /// True exactly where the supervised loss applies: query tokens of
    /// examples that carry tags.
    pub loss_mask: Vec<Vec<bool>>,
    /// Tag ids; 0 wherever `loss_mask` is false.
    pub tag_ids: Vec<Vec<usize>>,
}

impl EncodedBatch {
    pub fn batch_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }
}

/// Encode examples with their first `k` titles, padding to the longest
/// sequence in the batch.
pub fn encode_batch(
    examples: &[QueryExample],
    k: usize,
    max_seq_len: usize,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<EncodedBatch> {
    if examples.is_empty() {
        return Err(Error::Data("encode_batch got an empty batch".into()));
    }
    let augmented: Vec<AugmentedSequence> =
        examples.iter().map(|e| augment_with_titles(e, k, max_seq_len)).collect();
    let width = augmented.iter().map(|a| a.tokens.len()).max().unwrap_or(0);

    let mut batch = EncodedBatch {
        token_ids: Vec::with_capacity(examples.len()),
        pad_mask: Vec::with_capacity(examples.len()),
        segment_ids: Vec::with_capacity(examples.len()),
        loss_mask: Vec::with_capacity(examples.len()),
        tag_ids: Vec::with_capacity(examples.len()),
    };
    for (example, aug) in examples.iter().zip(&augmented) {
        let n = aug.tokens.len();
        let mut token_ids = vec![PAD_ID; width];
        let mut pad_mask = vec![false; width];
        let mut segment_ids = vec![0; width];
        let mut loss_mask = vec![false; width];
        let mut tag_ids = vec![0; width];
        for i in 0..n {
            token_ids[i] = vocab.id(&aug.tokens[i]);
            pad_mask[i] = true;
            segment_ids[i] = aug.segment_ids[i];
        }
        if let Some(tags) = &example.tags {
            for i in 0..n {
                if aug.loss_mask[i] {
                    loss_mask[i] = true;
                    tag_ids[i] = scheme.tag_id(&tags[i])?;
                }
            }
        }
        batch.token_ids.push(token_ids);
        batch.pad_mask.push(pad_mask);
        batch.segment_ids.push(segment_ids);
        batch.loss_mask.push(loss_mask);
        batch.tag_ids.push(tag_ids);
    }
    Ok(batch)
}
