//! Weak-label generation: prompt construction under four strategies,
//! demonstration retrieval, response parsing into BIO tags, and
//! prompt-strategy scoring against gold labels.
//!
//! Prompt templates live in `resources/prompts/` as versioned plain-text
//! files with named placeholders; construction is a pure function of the
//! strategy, example, pool, and template version.

mod client;
mod mock;

pub use client::{
    CacheOnlyClient, CachingClient, LabelerClient, RemoteLabeler, ENDPOINT_VAR, MODEL_VAR,
    TOKEN_VAR,
};
pub use mock::{MockBehavior, MockLabeler};

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, Quality, QueryExample, Source, Vocabulary};
use crate::eval::{extract_spans, span_f1, SpanReport};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PROMPT_TEMPLATE_VERSION: &str = "v1";

const PROMPTING_TEMPLATE: &str = include_str!("../../resources/prompts/v1/prompting.txt");
const DEMONSTRATION_TEMPLATE: &str =
    include_str!("../../resources/prompts/v1/demonstration.txt");
const CHAIN_OF_THOUGHTS_TEMPLATE: &str =
    include_str!("../../resources/prompts/v1/chain_of_thoughts.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Prompting,
    Demonstration,
    DynamicDemonstration,
    ChainOfThoughts,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompting" => Ok(StrategyKind::Prompting),
            "demonstration" => Ok(StrategyKind::Demonstration),
            "dynamic-demonstration" => Ok(StrategyKind::DynamicDemonstration),
            "chain-of-thoughts" => Ok(StrategyKind::ChainOfThoughts),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}, expected prompting, demonstration, \
                 dynamic-demonstration, or chain-of-thoughts"
            ))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StrategyKind::Prompting => "prompting",
            StrategyKind::Demonstration => "demonstration",
            StrategyKind::DynamicDemonstration => "dynamic-demonstration",
            StrategyKind::ChainOfThoughts => "chain-of-thoughts",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolarityOrder {
    /// Most similar demonstrations only.
    Positive,
    /// Most similar, then least similar.
    PositiveThenNegative,
    /// Least similar, then most similar.
    NegativeThenPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    pub demo_count: usize,
    pub polarity_order: PolarityOrder,
    /// Titles included in a chain-of-thoughts prompt.
    pub title_count: usize,
}

impl PromptStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        PromptStrategy { kind, demo_count: 3, polarity_order: PolarityOrder::Positive, title_count: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != StrategyKind::Prompting && self.demo_count == 0 {
            return Err(Error::Config(format!(
                "{} requires at least one demonstration",
                self.kind
            )));
        }
        if self.kind == StrategyKind::ChainOfThoughts && self.title_count == 0 {
            return Err(Error::Config("chain-of-thoughts requires at least one title".into()));
        }
        Ok(())
    }
}

/// Gold-labeled examples with precomputed unit bag-of-embeddings vectors,
/// self-contained for retrieval: it keeps the vocabulary and embedding
/// table used to vectorize queries.
pub struct DemonstrationPool {
    items: Vec<PoolItem>,
    vocab: Vocabulary,
    embed: Tensor,
}

struct PoolItem {
    example: QueryExample,
    vector: Vec<f64>,
}

impl DemonstrationPool {
    /// `token_embeddings` is the current model's token table, `[V, D]`.
    pub fn build(
        examples: &[QueryExample],
        vocab: &Vocabulary,
        token_embeddings: &Tensor,
    ) -> Result<Self> {
        if token_embeddings.shape().len() != 2
            || token_embeddings.shape()[0] != vocab.len()
        {
            return Err(Error::ShapeMismatch {
                op: "demonstration pool",
                left: vec![vocab.len(), 0],
                right: token_embeddings.shape().to_vec(),
            });
        }
        let mut items = Vec::with_capacity(examples.len());
        for example in examples {
            example.tags()?;
            let vector = bag_vector(&example.query, vocab, token_embeddings);
            items.push(PoolItem { example: example.clone(), vector });
        }
        Ok(DemonstrationPool {
            items,
            vocab: vocab.clone(),
            embed: token_embeddings.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Unit mean-of-token-embeddings vector for an arbitrary query.
    pub fn vector_of(&self, query: &[String]) -> Vec<f64> {
        bag_vector(query, &self.vocab, &self.embed)
    }
}

/// Mean of the embedding rows of the query tokens, unit-normalized.
/// An all-zero mean stays zero and is orthogonal to everything.
fn bag_vector(query: &[String], vocab: &Vocabulary, embed: &Tensor) -> Vec<f64> {
    let d = embed.cols();
    let mut v = vec![0.0; d];
    if query.is_empty() {
        return v;
    }
    for token in query {
        let row = vocab.id(token);
        for (i, x) in v.iter_mut().enumerate() {
            *x += embed.data()[row * d + i];
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Demonstrations for a query: `k` nearest by cosine (positives) and/or
/// `k` farthest (negatives), ordered per the polarity setting. Ties break
/// toward the lower pool index; negatives never repeat a positive.
pub fn retrieve_demonstrations<'p>(
    query: &QueryExample,
    pool: &'p DemonstrationPool,
    k: usize,
    order: PolarityOrder,
) -> Result<Vec<&'p QueryExample>> {
    if pool.is_empty() {
        return Err(Error::Data("demonstration pool is empty".into()));
    }
    let need = match order {
        PolarityOrder::Positive => k,
        _ => 2 * k,
    };
    if pool.len() < need {
        return Err(Error::Data(format!(
            "demonstration pool holds {} examples, {need} needed",
            pool.len()
        )));
    }
    let qv = pool.vector_of(&query.query);
    let mut scored: Vec<(usize, f64)> = pool
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let dot: f64 = qv.iter().zip(&item.vector).map(|(a, b)| a * b).sum();
            (i, dot)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let positives: Vec<usize> = scored[..k].iter().map(|&(i, _)| i).collect();
    let negatives: Vec<usize> = scored
        .iter()
        .rev()
        .map(|&(i, _)| i)
        .filter(|i| !positives.contains(i))
        .take(k)
        .collect();
    let picked: Vec<usize> = match order {
        PolarityOrder::Positive => positives,
        PolarityOrder::PositiveThenNegative => {
            positives.into_iter().chain(negatives).collect()
        }
        PolarityOrder::NegativeThenPositive => {
            negatives.into_iter().chain(positives).collect()
        }
    };
    Ok(picked.into_iter().map(|i| &pool.items[i].example).collect())
}

/// Fixed demonstrations: a deterministic greedy scan that prefers
/// examples adding uncovered categories, so a handful of demos shows
/// every category when the pool allows it.
fn fixed_demonstrations<'p>(
    pool: &'p DemonstrationPool,
    k: usize,
    scheme: &LabelScheme,
) -> Result<Vec<&'p QueryExample>> {
    if pool.len() < k {
        return Err(Error::Data(format!(
            "demonstration pool holds {} examples, {k} needed",
            pool.len()
        )));
    }
    let mut covered: std::collections::BTreeSet<String> = Default::default();
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for want_new in [true, false] {
        for (i, item) in pool.items.iter().enumerate() {
            if picked.len() == k {
                break;
            }
            if picked.contains(&i) {
                continue;
            }
            let cats: Vec<String> = item
                .example
                .tags()
                .expect("pool examples are tagged")
                .iter()
                .filter(|t| *t != "O")
                .map(|t| t[2..].to_string())
                .collect();
            let adds_new = cats.iter().any(|c| !covered.contains(c));
            if want_new && !adds_new {
                continue;
            }
            covered.extend(cats);
            picked.push(i);
        }
        let _ = scheme; // coverage is best-effort against the pool's labels
    }
    Ok(picked.into_iter().map(|i| &pool.items[i].example).collect())
}

/// One `token -> Category` line per token; the exact grammar
/// `parse_labels` accepts, also used to render demonstration answers.
pub fn format_response(tokens: &[String], tags: &[String]) -> Result<String> {
    if tokens.len() != tags.len() {
        return Err(Error::Data(format!(
            "{} tokens but {} tags to format",
            tokens.len(),
            tags.len()
        )));
    }
    let lines: Vec<String> = tokens
        .iter()
        .zip(tags)
        .map(|(tok, tag)| {
            let category = if tag == "O" { "Other" } else { &tag[2..] };
            format!("{tok} -> {category}")
        })
        .collect();
    Ok(lines.join("\n"))
}

fn demo_block(example: &QueryExample) -> Result<String> {
    let answer = format_response(&example.query, example.tags()?)?;
    Ok(format!("Query: {}\nAnswer:\n{answer}", example.query.join(" ")))
}

/// Deterministic prompt text for one example under a strategy.
pub fn build_prompt(
    strategy: &PromptStrategy,
    example: &QueryExample,
    pool: &DemonstrationPool,
    scheme: &LabelScheme,
) -> Result<String> {
    strategy.validate()?;
    let categories = scheme.categories().join(", ");
    let query = example.query.join(" ");

    let template = match strategy.kind {
        StrategyKind::Prompting => PROMPTING_TEMPLATE,
        StrategyKind::Demonstration | StrategyKind::DynamicDemonstration => {
            DEMONSTRATION_TEMPLATE
        }
        StrategyKind::ChainOfThoughts => CHAIN_OF_THOUGHTS_TEMPLATE,
    };

    let demos = match strategy.kind {
        StrategyKind::Prompting => String::new(),
        StrategyKind::Demonstration | StrategyKind::ChainOfThoughts => {
            let picked = fixed_demonstrations(pool, strategy.demo_count, scheme)?;
            picked.iter().map(|e| demo_block(e)).collect::<Result<Vec<_>>>()?.join("\n\n")
        }
        StrategyKind::DynamicDemonstration => {
            let picked = retrieve_demonstrations(
                example,
                pool,
                strategy.demo_count,
                strategy.polarity_order,
            )?;
            picked.iter().map(|e| demo_block(e)).collect::<Result<Vec<_>>>()?.join("\n\n")
        }
    };

    let mut prompt = template
        .replace("{categories}", &categories)
        .replace("{demos}", &demos)
        .replace("{query}", &query);

    if strategy.kind == StrategyKind::ChainOfThoughts {
        if example.titles.is_empty() {
            return Err(Error::Data(format!(
                "chain-of-thoughts prompt for {query:?} needs titles"
            )));
        }
        let shown = example.titles.iter().take(strategy.title_count);
        let titles: Vec<String> =
            shown.map(|t| format!("- {}", t.join(" "))).collect();
        prompt = prompt.replace("{titles}", &titles.join("\n"));
    }
    Ok(prompt)
}

/// Parse a completion into BIO tags for the given query tokens.
///
/// Grammar: one `token -> Category` line per query token, in order;
/// case and surrounding whitespace are forgiven; anything else fails.
/// Categories become BIO by contiguity: a run of the same category is
/// `B-X I-X ...`, `Other` is `O`.
pub fn parse_labels(
    response: &str,
    query_tokens: &[String],
    scheme: &LabelScheme,
) -> Result<Vec<String>> {
    let fail = |reason: String| Error::ParseFailure { reason, raw: response.to_string() };
    let lines: Vec<&str> =
        response.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != query_tokens.len() {
        return Err(fail(format!(
            "expected {} answer lines, found {}",
            query_tokens.len(),
            lines.len()
        )));
    }
    let mut categories: Vec<Option<String>> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let (token, category) = line
            .split_once("->")
            .ok_or_else(|| fail(format!("line {} has no `->`: {line:?}", i + 1)))?;
        let token = token.trim();
        if !token.eq_ignore_ascii_case(&query_tokens[i]) {
            return Err(fail(format!(
                "line {} labels {token:?}, expected token {:?}",
                i + 1,
                query_tokens[i]
            )));
        }
        let category = category.trim();
        if category.eq_ignore_ascii_case("other") {
            categories.push(None);
            continue;
        }
        let known = scheme
            .categories()
            .iter()
            .find(|c| c.eq_ignore_ascii_case(category))
            .ok_or_else(|| fail(format!("line {} names unknown category {category:?}", i + 1)))?;
        categories.push(Some(known.clone()));
    }
    let mut tags = Vec::with_capacity(categories.len());
    for i in 0..categories.len() {
        match &categories[i] {
            None => tags.push("O".to_string()),
            Some(cat) => {
                let continues = i > 0 && categories[i - 1].as_deref() == Some(cat);
                tags.push(format!("{}-{cat}", if continues { "I" } else { "B" }));
            }
        }
    }
    Ok(tags)
}

/// Outcome counts for a weak-label generation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub attempted: usize,
    pub labeled: usize,
    pub parse_failures: usize,
    pub client_failures: usize,
}

impl RejectionStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.attempted == 0 {
            return 0.0;
        }
        (self.parse_failures + self.client_failures) as f64 / self.attempted as f64
    }
}

/// Label every example through the client; failures are dropped and
/// counted, never repaired. Successes carry weak quality and llm source.
pub fn generate_weak_labels(
    examples: &[QueryExample],
    strategy: &PromptStrategy,
    client: &mut dyn LabelerClient,
    pool: &DemonstrationPool,
    scheme: &LabelScheme,
) -> Result<(Vec<QueryExample>, RejectionStats)> {
    let mut stats = RejectionStats::default();
    let mut labeled = Vec::with_capacity(examples.len());
    for example in examples {
        stats.attempted += 1;
        let prompt = build_prompt(strategy, example, pool, scheme)?;
        let response = match client.complete(&prompt) {
            Ok(r) => r,
            Err(_) => {
                stats.client_failures += 1;
                continue;
            }
        };
        let tags = match parse_labels(&response, &example.query, scheme) {
            Ok(t) => t,
            Err(_) => {
                stats.parse_failures += 1;
                continue;
            }
        };
        labeled.push(QueryExample::new(
            example.query.clone(),
            example.titles.clone(),
            Some(tags),
            Quality::Weak,
            Source::Llm,
        )?);
        stats.labeled += 1;
    }
    Ok((labeled, stats))
}

/// Span-level scores of one strategy's weak labels against gold tags.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyReport {
    pub brand_f1: f64,
    pub overall_f1: f64,
    pub report: SpanReport,
    pub stats: RejectionStats,
}

/// Generate weak labels on a gold-labeled test set and score them.
/// Examples the client or parser rejects count as all-O predictions.
pub fn evaluate_prompt_strategy(
    strategy: &PromptStrategy,
    testset: &[QueryExample],
    client: &mut dyn LabelerClient,
    pool: &DemonstrationPool,
    scheme: &LabelScheme,
) -> Result<StrategyReport> {
    let mut stats = RejectionStats::default();
    let mut gold = Vec::with_capacity(testset.len());
    let mut predicted = Vec::with_capacity(testset.len());
    for example in testset {
        let gold_tags = example.tags()?;
        stats.attempted += 1;
        let prompt = build_prompt(strategy, example, pool, scheme)?;
        let tags = match client.complete(&prompt) {
            Err(_) => {
                stats.client_failures += 1;
                None
            }
            Ok(response) => match parse_labels(&response, &example.query, scheme) {
                Err(_) => {
                    stats.parse_failures += 1;
                    None
                }
                Ok(t) => {
                    stats.labeled += 1;
                    Some(t)
                }
            },
        };
        gold.push(extract_spans(gold_tags)?);
        predicted.push(match tags {
            Some(t) => extract_spans(&t)?,
            None => Vec::new(),
        });
    }
    let report = span_f1(&gold, &predicted)?;
    let brand_f1 = report.per_label.get("Brand").map(|c| c.f1()).unwrap_or(0.0);
    Ok(StrategyReport { brand_f1, overall_f1: report.overall.f1(), report, stats })
}
