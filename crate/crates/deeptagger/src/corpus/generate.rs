//! Synthetic ads-query corpus with controllable difficulty.
//!
//! Queries come from a template grammar over per-category lexicons. A
//! configurable share of queries uses an *ambiguous* surface form that
//! exists in both the brand and the product lexicon; its true category is
//! drawn at generation time and is not recoverable from the query text
//! alone. Search-result titles mention the entity together with
//! category-signal words with a fixed per-title probability, so each
//! additional title raises the chance that the category is resolvable.
//! Lexicons are a pure function of the config (not the seed), which lets
//! other components reconstruct the token→category rules.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::encode::corrupt_labels;
use super::{LabelScheme, Quality, QueryExample, Source};
use crate::tensor::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Entries per category lexicon.
    pub lexicon_size: usize,
    /// Fraction of lexicon entries that are two-token phrases.
    pub two_token_entity_prob: f64,
    /// Surface forms shared between the brand and product lexicons.
    pub ambiguous_tokens: usize,
    /// Chance a query is built around an ambiguous surface form.
    pub ambiguous_query_prob: f64,
    pub unlabeled: usize,
    pub weak: usize,
    pub strong: usize,
    pub test: usize,
    /// Category-flip rate applied to the weak set's gold tags.
    pub noise_rate: f64,
    /// Titles generated per query.
    pub titles_per_query: usize,
    /// Chance each title carries category-resolving signal words.
    pub title_informative_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            lexicon_size: 120,
            two_token_entity_prob: 0.3,
            ambiguous_tokens: 25,
            ambiguous_query_prob: 0.3,
            unlabeled: 10_000,
            weak: 2_000,
            strong: 500,
            test: 500,
            noise_rate: 0.3,
            titles_per_query: 3,
            title_informative_prob: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub unlabeled: Vec<QueryExample>,
    pub weak: Vec<QueryExample>,
    pub strong: Vec<QueryExample>,
    pub test: Vec<QueryExample>,
    pub scheme: LabelScheme,
}

/// Deterministic token→category knowledge derivable from a config.
/// Ambiguous tokens are listed separately: their category varies per
/// example and only title context resolves it.
#[derive(Debug, Clone)]
pub struct DomainRules {
    pub token_category: BTreeMap<String, String>,
    pub ambiguous: BTreeSet<String>,
    pub brand_signals: Vec<String>,
    pub product_signals: Vec<String>,
}

const BRAND_SYL: [&str; 12] =
    ["zor", "vek", "lum", "tari", "nex", "quil", "dra", "fen", "gos", "hyle", "jex", "kiro"];
const PRODUCT_SYL: [&str; 12] =
    ["blen", "cam", "pho", "lap", "spea", "char", "moni", "rou", "dri", "vac", "prin", "toas"];
const LOCATION_SYL: [&str; 12] =
    ["ald", "bry", "cor", "dun", "elm", "fir", "gran", "hart", "ives", "jasp", "kel", "lyn"];
const ATTRIBUTE_SYL: [&str; 12] =
    ["plush", "matte", "slee", "grim", "tuff", "ligh", "herm", "opal", "ritz", "sere", "velv", "wist"];
const AMBIG_SYL: [&str; 8] = ["mira", "sol", "bren", "cald", "dov", "eri", "falk", "gem"];

const BRAND_SUFFIX: [&str; 4] = ["labs", "works", "co", "group"];
const PRODUCT_SUFFIX: [&str; 4] = ["kit", "pro", "mini", "case"];
const LOCATION_SUFFIX: [&str; 4] = ["city", "port", "valley", "springs"];
const ATTRIBUTE_SUFFIX: [&str; 2] = ["grade", "finish"];

const BRAND_SIGNALS: [&str; 4] = ["official", "dealer", "warranty", "brandstore"];
const PRODUCT_SIGNALS: [&str; 4] = ["review", "specs", "unboxing", "model"];
const LOCATION_SIGNALS: [&str; 2] = ["directions", "map"];
const ATTRIBUTE_SIGNALS: [&str; 2] = ["rated", "style"];

const DISTRACTORS: [&str; 20] = [
    "free", "shipping", "today", "top", "guide", "compare", "order", "stock", "offer",
    "weekly", "trusted", "home", "page", "results", "save", "extra", "open", "late",
    "local", "fast",
];

const CAT_BRAND: &str = "Brand";
const CAT_PRODUCT: &str = "Product";
const CAT_LOCATION: &str = "Location";
const CAT_ATTRIBUTE: &str = "Attribute";

#[derive(Clone, Copy)]
enum Slot {
    Brand,
    Product,
    Location,
    Attribute,
    /// The ambiguous focus token; resolves to Brand or Product per example.
    Amb,
    Word(&'static str),
}

use Slot::{Amb, Attribute, Brand, Location, Product, Word};

/// Weighted templates for unambiguous queries. Weights and entity phrase
/// lengths are tuned so the mean query length sits near 3.9 tokens.
const REGULAR_TEMPLATES: [(&[Slot], f64); 9] = [
    (&[Brand, Product], 0.10),
    (&[Brand, Product, Word("in"), Location], 0.20),
    (&[Attribute, Product], 0.08),
    (&[Attribute, Brand, Product], 0.14),
    (&[Product, Word("in"), Location], 0.09),
    (&[Word("buy"), Brand, Product, Word("online")], 0.15),
    (&[Word("buy"), Attribute, Product, Word("in"), Location], 0.15),
    (&[Product], 0.05),
    (&[Brand], 0.04),
];

/// Templates whose entity slot is position-ambiguous: nothing in the query
/// reveals whether the focus is a brand or a product. The larger templates
/// keep the ambiguous query space far bigger than any requested corpus, so
/// deduplication does not erode the ambiguous share.
const AMBIG_TEMPLATES: [(&[Slot], f64); 5] = [
    (&[Amb], 0.04),
    (&[Attribute, Amb], 0.22),
    (&[Word("buy"), Amb, Word("online")], 0.10),
    (&[Amb, Word("in"), Location], 0.28),
    (&[Attribute, Amb, Word("in"), Location], 0.36),
];

struct Lexicons {
    brands: Vec<Vec<String>>,
    products: Vec<Vec<String>>,
    locations: Vec<Vec<String>>,
    attributes: Vec<Vec<String>>,
    ambiguous: Vec<String>,
}

/// Deterministic pseudo-random decision for lexicon entry `i`.
fn entry_hash(category: usize, i: usize) -> f64 {
    let mut z = (category as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn build_entries(
    syllables: &[&str],
    suffixes: &[&str],
    count: usize,
    two_token_prob: f64,
    category: usize,
) -> Result<Vec<Vec<String>>> {
    let cap = syllables.len() * syllables.len();
    if count > cap {
        return Err(Error::Config(format!(
            "lexicon size {count} exceeds the {cap} distinct words available"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let word = format!("{}{}", syllables[i / syllables.len()], syllables[i % syllables.len()]);
        if entry_hash(category, i) < two_token_prob {
            let suffix = suffixes[i % suffixes.len()].to_string();
            out.push(vec![word, suffix]);
        } else {
            out.push(vec![word]);
        }
    }
    Ok(out)
}

impl Lexicons {
    fn build(config: &GeneratorConfig) -> Result<Self> {
        let p = config.two_token_entity_prob;
        let amb_cap = AMBIG_SYL.len() * AMBIG_SYL.len();
        if config.ambiguous_tokens > amb_cap {
            return Err(Error::Config(format!(
                "ambiguous_tokens {} exceeds the {amb_cap} available",
                config.ambiguous_tokens
            )));
        }
        let ambiguous = (0..config.ambiguous_tokens)
            .map(|i| format!("{}{}", AMBIG_SYL[i / AMBIG_SYL.len()], AMBIG_SYL[i % AMBIG_SYL.len()]))
            .collect();
        Ok(Lexicons {
            brands: build_entries(&BRAND_SYL, &BRAND_SUFFIX, config.lexicon_size, p, 0)?,
            products: build_entries(&PRODUCT_SYL, &PRODUCT_SUFFIX, config.lexicon_size, p, 1)?,
            locations: build_entries(&LOCATION_SYL, &LOCATION_SUFFIX, config.lexicon_size, p, 2)?,
            attributes: build_entries(&ATTRIBUTE_SYL, &ATTRIBUTE_SUFFIX, config.lexicon_size, p, 3)?,
            ambiguous,
        })
    }

    fn for_category(&self, cat: &str) -> &[Vec<String>] {
        match cat {
            CAT_BRAND => &self.brands,
            CAT_PRODUCT => &self.products,
            CAT_LOCATION => &self.locations,
            _ => &self.attributes,
        }
    }
}

/// Expose the config's deterministic token→category knowledge.
pub fn domain_rules(config: &GeneratorConfig) -> Result<DomainRules> {
    let lex = Lexicons::build(config)?;
    let mut token_category = BTreeMap::new();
    let mut insert = |entries: &[Vec<String>], cat: &str| {
        for entry in entries {
            for token in entry {
                token_category.insert(token.clone(), cat.to_string());
            }
        }
    };
    insert(&lex.brands, CAT_BRAND);
    insert(&lex.products, CAT_PRODUCT);
    insert(&lex.locations, CAT_LOCATION);
    insert(&lex.attributes, CAT_ATTRIBUTE);
    Ok(DomainRules {
        token_category,
        ambiguous: lex.ambiguous.iter().cloned().collect(),
        brand_signals: BRAND_SIGNALS.map(String::from).to_vec(),
        product_signals: PRODUCT_SIGNALS.map(String::from).to_vec(),
    })
}

struct QueryDraft {
    tokens: Vec<String>,
    tags: Vec<String>,
    /// Entity the titles talk about, with its true category.
    focus: (Vec<String>, &'static str),
}

fn pick_template<'a>(templates: &'a [(&'a [Slot], f64)], rng: &mut Rng) -> &'a [Slot] {
    let total: f64 = templates.iter().map(|(_, w)| w).sum();
    let mut roll = rng.uniform() * total;
    for (slots, w) in templates {
        roll -= w;
        if roll <= 0.0 {
            return slots;
        }
    }
    templates.last().expect("templates are non-empty").0
}

fn push_entity(draft: &mut QueryDraft, entry: &[String], cat: &str) {
    for (i, tok) in entry.iter().enumerate() {
        draft.tokens.push(tok.clone());
        draft.tags.push(if i == 0 { format!("B-{cat}") } else { format!("I-{cat}") });
    }
}

fn sample_query(lex: &Lexicons, config: &GeneratorConfig, rng: &mut Rng) -> QueryDraft {
    let ambiguous = rng.chance(config.ambiguous_query_prob) && !lex.ambiguous.is_empty();
    let template = if ambiguous {
        pick_template(&AMBIG_TEMPLATES, rng)
    } else {
        pick_template(&REGULAR_TEMPLATES, rng)
    };
    let mut draft = QueryDraft { tokens: Vec::new(), tags: Vec::new(), focus: (Vec::new(), "") };
    let mut entities: Vec<(Vec<String>, &'static str)> = Vec::new();
    for slot in template {
        match slot {
            Word(w) => {
                draft.tokens.push(w.to_string());
                draft.tags.push("O".to_string());
            }
            Amb => {
                let token = rng.choose(&lex.ambiguous).clone();
                let cat = if rng.chance(0.5) { CAT_BRAND } else { CAT_PRODUCT };
                push_entity(&mut draft, std::slice::from_ref(&token), cat);
                entities.push((vec![token], cat));
                // The ambiguous entity is always the focus.
                draft.focus = entities.last().expect("just pushed").clone();
            }
            Brand | Product | Location | Attribute => {
                let cat = match slot {
                    Brand => CAT_BRAND,
                    Product => CAT_PRODUCT,
                    Location => CAT_LOCATION,
                    _ => CAT_ATTRIBUTE,
                };
                let entry = rng.choose(lex.for_category(cat)).clone();
                push_entity(&mut draft, &entry, cat);
                entities.push((entry, cat));
            }
        }
    }
    if draft.focus.0.is_empty() {
        draft.focus = rng.choose(&entities).clone();
    }
    draft
}

fn signals_for(cat: &str) -> &'static [&'static str] {
    match cat {
        CAT_BRAND => &BRAND_SIGNALS,
        CAT_PRODUCT => &PRODUCT_SIGNALS,
        CAT_LOCATION => &LOCATION_SIGNALS,
        _ => &ATTRIBUTE_SIGNALS,
    }
}

/// A title is a short phrase of 4 to 6 tokens. Informative titles mention
/// the focus entity immediately followed by one of its category's signal
/// words, a pattern stable enough for a small encoder to pick up; the
/// rest are distractor text, occasionally naming an unrelated entity.
fn make_title(
    focus: &(Vec<String>, &'static str),
    informative: bool,
    lex: &Lexicons,
    rng: &mut Rng,
) -> Vec<String> {
    let target_len = 4 + [0, 1, 1][rng.below(3)];
    let mut units: Vec<Vec<String>> = Vec::new();
    if informative {
        let mut mention = focus.0.clone();
        mention.push(rng.choose(signals_for(focus.1)).to_string());
        units.push(mention);
    } else if rng.chance(0.15) {
        let cat = [CAT_BRAND, CAT_PRODUCT, CAT_LOCATION, CAT_ATTRIBUTE][rng.below(4)];
        units.push(rng.choose(lex.for_category(cat)).clone());
    }
    while units.iter().map(Vec::len).sum::<usize>() < target_len {
        units.push(vec![rng.choose(&DISTRACTORS).to_string()]);
    }
    rng.shuffle(&mut units);
    units.concat()
}

fn make_example(
    lex: &Lexicons,
    config: &GeneratorConfig,
    quality: Quality,
    rng: &mut Rng,
) -> Result<QueryExample> {
    let draft = sample_query(lex, config, rng);
    let titles = (0..config.titles_per_query)
        .map(|_| make_title(&draft.focus, rng.chance(config.title_informative_prob), lex, rng))
        .collect();
    let tags = match quality {
        Quality::Unlabeled => None,
        _ => Some(draft.tags),
    };
    QueryExample::new(draft.tokens, titles, tags, quality, Source::Synthetic)
}

/// Attempts per example before concluding the query space is exhausted.
const DEDUP_ATTEMPTS: u64 = 200;

/// Generate the four splits. Queries are globally deduplicated, so no test
/// query ever appears in a training split. Each example derives its own
/// RNG stream from `(rng, example index, attempt)`, making output
/// independent of generation order.
pub fn generate_synthetic_corpus(config: &GeneratorConfig, rng: &Rng) -> Result<SyntheticCorpus> {
    let lex = Lexicons::build(config)?;
    let scheme = LabelScheme::default_synthetic();
    let total = config.test + config.strong + config.weak + config.unlabeled;
    let mut seen: HashSet<String> = HashSet::with_capacity(total);

    let mut corpus = SyntheticCorpus {
        unlabeled: Vec::with_capacity(config.unlabeled),
        weak: Vec::with_capacity(config.weak),
        strong: Vec::with_capacity(config.strong),
        test: Vec::with_capacity(config.test),
        scheme,
    };

    let plan: [(Quality, usize); 4] = [
        (Quality::Strong, config.test), // test split carries gold tags
        (Quality::Strong, config.strong),
        (Quality::Weak, config.weak),
        (Quality::Unlabeled, config.unlabeled),
    ];
    let mut index: u64 = 0;
    for (split, &(quality, count)) in plan.iter().enumerate() {
        for _ in 0..count {
            let mut example = None;
            for attempt in 0..DEDUP_ATTEMPTS {
                let mut sub = rng.fork(index * DEDUP_ATTEMPTS + attempt);
                let candidate = make_example(&lex, config, quality, &mut sub)?;
                if seen.insert(candidate.query.join(" ")) {
                    example = Some((candidate, sub));
                    break;
                }
            }
            let (mut example, mut sub) = example.ok_or_else(|| {
                Error::Data(format!(
                    "query space exhausted after {} distinct queries; grow the lexicons \
                     or request fewer examples",
                    seen.len()
                ))
            })?;
            if quality == Quality::Weak {
                let noisy = corrupt_labels(
                    example.tags()?,
                    &corpus.scheme,
                    config.noise_rate,
                    &mut sub,
                )?;
                example.tags = Some(noisy);
                example.source = Source::Crowd;
            }
            match split {
                0 => corpus.test.push(example),
                1 => corpus.strong.push(example),
                2 => corpus.weak.push(example),
                _ => corpus.unlabeled.push(example),
            }
            index += 1;
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::augment_with_titles;
    use crate::eval::extract_spans;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            unlabeled: 200,
            weak: 100,
            strong: 50,
            test: 50,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn splits_have_requested_sizes_and_valid_tags() {
        let corpus = generate_synthetic_corpus(&small_config(), &Rng::new(42)).unwrap();
        assert_eq!(corpus.unlabeled.len(), 200);
        assert_eq!(corpus.weak.len(), 100);
        assert_eq!(corpus.strong.len(), 50);
        assert_eq!(corpus.test.len(), 50);
        for e in corpus.unlabeled.iter() {
            assert!(e.tags.is_none());
            assert_eq!(e.titles.len(), 3);
        }
        for e in corpus.strong.iter().chain(&corpus.test).chain(&corpus.weak) {
            let tags = e.tags().unwrap();
            extract_spans(tags).unwrap();
            for tag in tags {
                corpus.scheme.tag_id(tag).unwrap();
            }
        }
    }

    #[test]
    fn queries_are_globally_distinct() {
        let corpus = generate_synthetic_corpus(&small_config(), &Rng::new(7)).unwrap();
        let mut seen = HashSet::new();
        let all = corpus
            .unlabeled
            .iter()
            .chain(&corpus.weak)
            .chain(&corpus.strong)
            .chain(&corpus.test);
        for e in all {
            assert!(seen.insert(e.query.join(" ")), "duplicate query {:?}", e.query);
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate_synthetic_corpus(&small_config(), &Rng::new(9)).unwrap();
        let b = generate_synthetic_corpus(&small_config(), &Rng::new(9)).unwrap();
        assert_eq!(a.strong, b.strong);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic_corpus(&small_config(), &Rng::new(10)).unwrap();
        assert_ne!(a.strong, c.strong);
    }

    #[test]
    fn exhausting_the_query_space_is_an_error() {
        let config = GeneratorConfig {
            lexicon_size: 1,
            ambiguous_tokens: 0,
            two_token_entity_prob: 0.0,
            unlabeled: 500,
            weak: 0,
            strong: 0,
            test: 0,
            ..GeneratorConfig::default()
        };
        let err = generate_synthetic_corpus(&config, &Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("exhausted"), "{err}");
    }

    #[test]
    fn tiny_lexicon_still_produces_valid_examples() {
        let config = GeneratorConfig {
            lexicon_size: 1,
            ambiguous_tokens: 0,
            two_token_entity_prob: 0.0,
            unlabeled: 0,
            weak: 0,
            strong: 3,
            test: 0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&config, &Rng::new(3)).unwrap();
        assert_eq!(corpus.strong.len(), 3);
        for e in &corpus.strong {
            extract_spans(e.tags().unwrap()).unwrap();
        }
    }

    #[test]
    fn oversized_lexicon_request_is_rejected() {
        let config = GeneratorConfig { lexicon_size: 1_000, ..GeneratorConfig::default() };
        assert!(matches!(
            generate_synthetic_corpus(&config, &Rng::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mean_query_length_matches_the_calibration_target() {
        let config = GeneratorConfig {
            unlabeled: 2_000,
            weak: 0,
            strong: 0,
            test: 0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&config, &Rng::new(11)).unwrap();
        let mean = corpus.unlabeled.iter().map(|e| e.query.len() as f64).sum::<f64>() / 2_000.0;
        assert!((mean - 3.9).abs() <= 0.5, "mean query length {mean}");
    }

    #[test]
    fn mean_augmented_length_matches_the_calibration_target() {
        let config = GeneratorConfig {
            unlabeled: 2_000,
            weak: 0,
            strong: 0,
            test: 0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&config, &Rng::new(12)).unwrap();
        let mean = corpus
            .unlabeled
            .iter()
            .map(|e| augment_with_titles(e, 3, 512).tokens.len() as f64)
            .sum::<f64>()
            / 2_000.0;
        assert!((mean - 20.8).abs() <= 2.0, "mean augmented length {mean}");
    }

    #[test]
    fn ambiguous_tokens_occur_as_both_brand_and_product() {
        let config = GeneratorConfig {
            unlabeled: 0,
            weak: 0,
            strong: 400,
            test: 0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&config, &Rng::new(21)).unwrap();
        let rules = domain_rules(&config).unwrap();
        let mut as_brand = 0;
        let mut as_product = 0;
        for e in &corpus.strong {
            let tags = e.tags().unwrap();
            for (tok, tag) in e.query.iter().zip(tags) {
                if rules.ambiguous.contains(tok) {
                    match tag.as_str() {
                        "B-Brand" => as_brand += 1,
                        "B-Product" => as_product += 1,
                        other => panic!("ambiguous token tagged {other}"),
                    }
                }
            }
        }
        assert!(as_brand > 20, "only {as_brand} brand uses");
        assert!(as_product > 20, "only {as_product} product uses");
    }

    #[test]
    fn informative_titles_carry_the_right_signal_words() {
        let config = GeneratorConfig {
            unlabeled: 0,
            weak: 0,
            strong: 300,
            test: 0,
            title_informative_prob: 1.0,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&config, &Rng::new(31)).unwrap();
        let rules = domain_rules(&config).unwrap();
        let mut checked = 0;
        for e in &corpus.strong {
            let tags = e.tags().unwrap();
            for (tok, tag) in e.query.iter().zip(tags) {
                if !rules.ambiguous.contains(tok) {
                    continue;
                }
                // Every title mentioning the ambiguous token must carry a
                // signal word of its true category.
                let signals: &[String] = if tag == "B-Brand" {
                    &rules.brand_signals
                } else {
                    &rules.product_signals
                };
                for title in &e.titles {
                    if title.contains(tok) {
                        assert!(
                            title.iter().any(|w| signals.contains(w)),
                            "title {title:?} lacks a {tag} signal for {tok}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50, "only {checked} informative titles checked");
    }

    #[test]
    fn domain_rules_do_not_depend_on_the_seed() {
        let config = GeneratorConfig::default();
        let a = domain_rules(&config).unwrap();
        let b = domain_rules(&config).unwrap();
        assert_eq!(a.token_category, b.token_category);
        assert_eq!(a.ambiguous, b.ambiguous);
        assert!(!a.token_category.is_empty());
        // Ambiguous surface forms are deliberately absent from the
        // unambiguous token→category map.
        for tok in &a.ambiguous {
            assert!(!a.token_category.contains_key(tok));
        }
    }
}
