//! Dataset files: JSONL with titles, and CoNLL-style TSV for the
//! query-only view.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Quality, QueryExample, Source};
use crate::{Error, Result};

/// On-disk JSONL record. Queries and titles are stored as plain strings;
/// tokenization happens on read, so tags must align with the tokenized
/// query.
#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    query: String,
    titles: Vec<String>,
    tags: Option<Vec<String>>,
    quality: Quality,
    source: Source,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::DatasetParse { path: path.to_path_buf(), line, message: message.into() }
}

/// Read a JSONL dataset. Blank lines are allowed and skipped; any other
/// malformed line is reported with its 1-based line number.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<QueryExample>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let example = QueryExample::new(
            tokenize(&record.query),
            record.titles.iter().map(|t| tokenize(t)).collect(),
            record.tags,
            record.quality,
            record.source,
        )
        .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}

/// Write a JSONL dataset, one object per line, tokens joined by spaces.
pub fn write_jsonl(path: impl AsRef<Path>, examples: &[QueryExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let record = JsonlRecord {
            query: e.query.join(" "),
            titles: e.titles.iter().map(|t| t.join(" ")).collect(),
            tags: e.tags.clone(),
            quality: e.quality,
            source: e.source,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read CoNLL-style TSV: `token<TAB>tag` lines, blank line between
/// sequences. Yields strong human-quality examples without titles.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<QueryExample>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut start_line = 1;
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, at: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let example = QueryExample::new(
            std::mem::take(tokens),
            Vec::new(),
            Some(std::mem::take(tags)),
            Quality::Strong,
            Source::Human,
        )
        .map_err(|e| parse_err(path, at, e.to_string()))?;
        out.push(example);
        Ok(())
    };
    let mut last = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        last = lineno;
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, start_line)?;
            start_line = lineno + 1;
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno, "expected token<TAB>tag"))?;
        if token.is_empty() || tag.is_empty() {
            return Err(parse_err(path, lineno, "empty token or tag"));
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, start_line.min(last.max(1)))?;
    Ok(out)
}

/// Write the query-only view as CoNLL-style TSV. Titles are not
/// representable in this format and are dropped; unlabeled examples get
/// all-`O` rows.
pub fn write_conll(path: impl AsRef<Path>, examples: &[QueryExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for (i, e) in examples.iter().enumerate() {
        if i > 0 {
            w.write_all(b"\n")?;
        }
        for (j, token) in e.query.iter().enumerate() {
            let tag = e.tags.as_ref().map_or("O", |t| t[j].as_str());
            writeln!(w, "{token}\t{tag}")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Vec<QueryExample> {
        vec![
            QueryExample::new(
                vec!["credit".into(), "card".into(), "square".into()],
                vec![
                    vec!["square".into(), "payments".into(), "official".into()],
                    vec!["compare".into(), "cards".into()],
                ],
                Some(vec!["B-Product".into(), "I-Product".into(), "B-Brand".into()]),
                Quality::Strong,
                Source::Human,
            )
            .unwrap(),
            QueryExample::unlabeled(
                vec!["remote".into(), "it".into(), "support".into(), "tools".into()],
                vec![],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn jsonl_round_trips_field_by_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let examples = sample();
        write_jsonl(&path, &examples).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, examples);
    }

    #[test]
    fn jsonl_rewrite_is_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_jsonl(&a, &sample()).unwrap();
        write_jsonl(&b, &read_jsonl(&a).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());
        assert!(read_conll(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_jsonl_reports_the_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"query\":\"ok one\",\"titles\":[],\"tags\":null,\"quality\":\"unlabeled\",\"source\":\"human\"}\nnot json\n",
        )
        .unwrap();
        match read_jsonl(&path).unwrap_err() {
            Error::DatasetParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn misaligned_tags_are_a_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"query\":\"two words\",\"titles\":[],\"tags\":[\"O\"],\"quality\":\"strong\",\"source\":\"human\"}\n",
        )
        .unwrap();
        match read_jsonl(&path).unwrap_err() {
            Error::DatasetParse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn conll_round_trips_the_query_view() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let examples = sample();
        write_conll(&path, &examples).unwrap();
        let back = read_conll(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].query, examples[0].query);
        assert_eq!(back[0].tags, examples[0].tags);
        assert!(back[0].titles.is_empty());
        // Unlabeled examples come back as all-O strong annotations.
        assert_eq!(back[1].query, examples[1].query);
        assert_eq!(back[1].tags.as_ref().unwrap(), &vec!["O"; 4]);
    }

    #[test]
    fn conll_without_tabs_reports_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "token\tO\nbroken line\n").unwrap();
        match read_conll(&path).unwrap_err() {
            Error::DatasetParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn conll_with_bad_bio_reports_the_sequence() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a\tO\n\nb\tI-Brand\n").unwrap();
        assert!(matches!(read_conll(&path), Err(Error::DatasetParse { .. })));
    }
}
