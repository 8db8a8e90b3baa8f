//! A deterministic stand-in for the remote labeler, driven by the
//! synthetic corpus's token rules. It reads the prompt the way the
//! pipeline hopes a capable model would: titles resolve ambiguous
//! tokens, demonstrations reduce mistakes in proportion to the category
//! coverage they exhibit, and a bare prompt is the least reliable.

use crate::corpus::{DomainRules, LabelScheme};
use crate::weak::LabelerClient;
use crate::{Error, Result};

/// Per-token category flip probabilities keyed on prompt features, plus
/// an optional rate of structurally malformed responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockBehavior {
    /// Flip rate with neither demonstrations nor titles in the prompt.
    pub bare_flip: f64,
    /// Flip rate when demonstrations cover every category; partial
    /// coverage interpolates back toward `bare_flip`.
    pub demo_flip: f64,
    /// Flip rate when search titles are present.
    pub title_flip: f64,
    /// Fraction of prompts answered with a malformed response.
    pub malformed_rate: f64,
}

impl Default for MockBehavior {
    fn default() -> Self {
        MockBehavior { bare_flip: 0.30, demo_flip: 0.18, title_flip: 0.05, malformed_rate: 0.0 }
    }
}

impl MockBehavior {
    /// No mistakes of any kind.
    pub fn perfect() -> Self {
        MockBehavior { bare_flip: 0.0, demo_flip: 0.0, title_flip: 0.0, malformed_rate: 0.0 }
    }

    /// The same flip rate regardless of prompt features.
    pub fn uniform(p: f64) -> Self {
        MockBehavior { bare_flip: p, demo_flip: p, title_flip: p, malformed_rate: 0.0 }
    }
}

pub struct MockLabeler {
    rules: DomainRules,
    scheme: LabelScheme,
    behavior: MockBehavior,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl MockLabeler {
    pub fn new(rules: DomainRules, scheme: LabelScheme, behavior: MockBehavior, seed: u64) -> Self {
        MockLabeler { rules, scheme, behavior, seed }
    }

    fn key(&self, parts: &[&str]) -> u64 {
        let mut h = self.seed;
        for part in parts {
            h = mix(h ^ fnv1a(part.as_bytes()));
        }
        h
    }

    /// Resolve an ambiguous token from title text: signal words vote for
    /// the category they advertise, ties fall back to a coin keyed on
    /// the query.
    fn resolve_ambiguous(&self, query: &str, index: usize, title_tokens: &[&str]) -> String {
        let brand_votes = title_tokens
            .iter()
            .filter(|t| self.rules.brand_signals.iter().any(|s| s == *t))
            .count();
        let product_votes = title_tokens
            .iter()
            .filter(|t| self.rules.product_signals.iter().any(|s| s == *t))
            .count();
        let brand = if brand_votes > product_votes {
            true
        } else if product_votes > brand_votes {
            false
        } else {
            self.key(&["guess", query, &index.to_string()]) & 1 == 0
        };
        if brand { "Brand".to_string() } else { "Product".to_string() }
    }

    fn flip(&self, query: &str, index: usize, current: &str) -> String {
        let mut options: Vec<&str> =
            self.scheme.categories().iter().map(String::as_str).collect();
        options.push("Other");
        options.retain(|c| *c != current);
        let pick = self.key(&["flip-target", query, &index.to_string()]) as usize % options.len();
        options[pick].to_string()
    }
}

impl LabelerClient for MockLabeler {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let lines: Vec<&str> = prompt.lines().collect();
        let query_line = lines
            .iter()
            .rposition(|l| l.trim_start().starts_with("Query: "))
            .ok_or_else(|| Error::Labeler("prompt has no query block".into()))?;
        let query = lines[query_line].trim_start().trim_start_matches("Query: ").trim();
        let tokens: Vec<&str> = query.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::Labeler("prompt query is empty".into()));
        }

        let title_tokens: Vec<&str> = lines[..query_line]
            .iter()
            .filter(|l| l.trim_start().starts_with("- "))
            .flat_map(|l| l.trim_start().trim_start_matches("- ").split_whitespace())
            .collect();
        let demos_present =
            lines[..query_line].iter().any(|l| l.trim_start().starts_with("Answer:"));
        let demo_categories: std::collections::BTreeSet<String> = lines[..query_line]
            .iter()
            .filter_map(|l| l.split_once("->"))
            .filter_map(|(_, cat)| {
                let cat = cat.trim();
                self.scheme.categories().iter().find(|c| c.eq_ignore_ascii_case(cat)).cloned()
            })
            .collect();

        let rate = if !title_tokens.is_empty() {
            self.behavior.title_flip
        } else if demos_present {
            let coverage = demo_categories.len() as f64 / self.scheme.categories().len() as f64;
            self.behavior.demo_flip
                + (self.behavior.bare_flip - self.behavior.demo_flip) * (1.0 - coverage)
        } else {
            self.behavior.bare_flip
        };

        let mut response_lines = Vec::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            let mut category = if let Some(cat) = self.rules.token_category.get(*token) {
                cat.clone()
            } else if self.rules.ambiguous.contains(*token) {
                self.resolve_ambiguous(query, i, &title_tokens)
            } else {
                "Other".to_string()
            };
            let roll = unit(self.key(&["flip", query, &i.to_string()]));
            if roll < rate {
                category = self.flip(query, i, &category);
            }
            response_lines.push(format!("{token} -> {category}"));
        }

        if unit(self.key(&["malformed", prompt])) < self.behavior.malformed_rate {
            response_lines.pop();
            if response_lines.is_empty() {
                return Ok("no labels today".to_string());
            }
        }
        Ok(response_lines.join("\n"))
    }
}
