//! Span-level evaluation for BIO tag sequences.
//!
//! Spans are compared by exact match on `(label, start, end)`. Scores are
//! micro-averaged: counts are summed over all sentences before computing
//! precision, recall, and F1. Gold tags must be well-formed; model outputs
//! may contain orphan `I-` tags, which [`extract_spans_repaired`] promotes
//! to span starts instead of rejecting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A labeled token range, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        EntitySpan { label: label.into(), start, end }
    }
}

/// Aggregate match counts for one label or for the whole corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl SpanCounts {
    /// Zero denominators score 0.0 rather than propagating NaN.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.actual)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged scores with a per-label breakdown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanReport {
    pub overall: SpanCounts,
    pub per_label: BTreeMap<String, SpanCounts>,
}

impl SpanReport {
    /// Fixed-width text table, one row per label plus an overall row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9} {:>8} {:>9} {:>7}",
            "label", "precision", "recall", "f1", "correct", "predicted", "actual"
        );
        let mut row = |name: &str, c: &SpanCounts| {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>9} {:>7}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.correct,
                c.predicted,
                c.actual
            );
        };
        for (label, counts) in &self.per_label {
            row(label, counts);
        }
        row("overall", &self.overall);
        out
    }
}

enum TagKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<TagKind<'_>> {
    if tag == "O" {
        return Ok(TagKind::Outside);
    }
    if let Some(label) = tag.strip_prefix("B-") {
        if !label.is_empty() {
            return Ok(TagKind::Begin(label));
        }
    }
    if let Some(label) = tag.strip_prefix("I-") {
        if !label.is_empty() {
            return Ok(TagKind::Inside(label));
        }
    }
    Err(Error::Data(format!("malformed BIO tag {tag:?}")))
}

/// Decode a well-formed BIO sequence into spans. An `I-` tag that does not
/// continue a span of the same label is an error.
pub fn extract_spans(tags: &[impl AsRef<str>]) -> Result<Vec<EntitySpan>> {
    decode(tags, false)
}

/// Decode model output, promoting orphan `I-` tags (sequence start, after
/// `O`, or after a span of a different label) to span starts.
pub fn extract_spans_repaired(tags: &[impl AsRef<str>]) -> Vec<EntitySpan> {
    decode(tags, true).expect("repair mode accepts every tag")
}

fn decode(tags: &[impl AsRef<str>], repair: bool) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let kind = match parse_tag(tag.as_ref()) {
            Ok(kind) => kind,
            Err(e) if repair => {
                // Unknown tag from a decoder bug would be caught upstream;
                // repair mode never sees one, but treat it as O regardless.
                debug_assert!(false, "{e}");
                TagKind::Outside
            }
            Err(e) => return Err(e),
        };
        match kind {
            TagKind::Outside => {
                if let Some((label, start)) = open.take() {
                    spans.push(EntitySpan { label, start, end: i });
                }
            }
            TagKind::Begin(label) => {
                if let Some((prev, start)) = open.take() {
                    spans.push(EntitySpan { label: prev, start, end: i });
                }
                open = Some((label.to_string(), i));
            }
            TagKind::Inside(label) => {
                let continues = open.as_ref().is_some_and(|(prev, _)| prev == label);
                if continues {
                    continue;
                }
                if !repair {
                    return Err(Error::Data(format!(
                        "orphan tag I-{label} at position {i} does not continue a span"
                    )));
                }
                if let Some((prev, start)) = open.take() {
                    spans.push(EntitySpan { label: prev, start, end: i });
                }
                open = Some((label.to_string(), i));
            }
        }
    }
    if let Some((label, start)) = open {
        spans.push(EntitySpan { label, start, end: tags.len() });
    }
    Ok(spans)
}

/// Micro-averaged span F1 over parallel per-sentence span sets.
pub fn span_f1(gold: &[Vec<EntitySpan>], predicted: &[Vec<EntitySpan>]) -> Result<SpanReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Data(format!(
            "span_f1 got {} gold sentences but {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut report = SpanReport::default();
    for (g, p) in gold.iter().zip(predicted) {
        for span in g {
            report.overall.actual += 1;
            report.per_label.entry(span.label.clone()).or_default().actual += 1;
        }
        for span in p {
            report.overall.predicted += 1;
            let entry = report.per_label.entry(span.label.clone()).or_default();
            entry.predicted += 1;
            if g.contains(span) {
                report.overall.correct += 1;
                entry.correct += 1;
            }
        }
    }
    Ok(report)
}

/// Span scores together with plain token accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggingReport {
    pub spans: SpanReport,
    pub token_accuracy: f64,
}

impl TaggingReport {
    pub fn overall_f1(&self) -> f64 {
        self.spans.overall.f1()
    }

    pub fn brand_f1(&self) -> f64 {
        self.spans.per_label.get("Brand").map(SpanCounts::f1).unwrap_or(0.0)
    }
}

/// Score predicted tag sequences against gold. Gold must be well-formed
/// BIO; predictions get the orphan-`I` repair before span extraction.
pub fn evaluate_tag_sequences(
    gold: &[Vec<String>],
    predicted: &[Vec<String>],
) -> Result<TaggingReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut gold_spans = Vec::with_capacity(gold.len());
    let mut predicted_spans = Vec::with_capacity(predicted.len());
    let (mut matched, mut total) = (0usize, 0usize);
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "example {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        gold_spans.push(extract_spans(g).map_err(|e| {
            Error::Data(format!("example {i}: invalid gold tags: {e}"))
        })?);
        predicted_spans.push(extract_spans_repaired(p));
        total += g.len();
        matched += g.iter().zip(p).filter(|(a, b)| a == b).count();
    }
    let spans = span_f1(&gold_spans, &predicted_spans)?;
    let token_accuracy = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
    Ok(TaggingReport { spans, token_accuracy })
}
