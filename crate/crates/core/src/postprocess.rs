//! Recovering `(id, adjuvant name)` rows from raw model output.
//!
//! Models are asked for a two-column table closed by a `Done` line. What
//! comes back ranges from a clean table to prose with the table embedded,
//! to everything flattened onto one space-joined line. The scanner handles
//! each line in one of two ways:
//!
//! - a line with exactly two fields (split on tabs, or on runs of two or
//!   more spaces unless `strict_tabs` is set) is a row;
//! - any other line is read as a token stream and re-segmented at
//!   identifier tokens (`PMID_…`, `NCT…`, or the expected id), each
//!   identifier opening a row whose name runs to the next identifier or
//!   `Done`.
//!
//! Header rows are skipped, lines after the first `Done` are ignored with a
//! warning.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::normalize;

pub const DEFAULT_CAP: usize = 3;

static ID_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(pmid|nct)[_:\-]?\d+$").unwrap());
static SPACE_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r" {2,}").unwrap());

/// One `(document, adjuvant surface form)` pair read from a response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Extraction {
    pub doc_id: String,
    pub name: String,
    pub source_run: u32,
}

impl Extraction {
    pub fn new(doc_id: impl Into<String>, name: impl Into<String>, source_run: u32) -> Self {
        Self {
            doc_id: doc_id.into().trim().to_owned(),
            name: name.into().trim().to_owned(),
            source_run,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParseWarning {
    TrailingContentAfterDone,
    HeaderRowSkipped,
    DuplicateRowDropped,
    OverCapTruncated,
    ForeignIdDropped,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("response has no Done line")]
    MissingDoneMarker,
    #[error("response is empty")]
    EmptyResponse,
}

/// Rows found by [`extract_table`], before any filtering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableScan {
    pub rows: Vec<(String, String)>,
    pub done_seen: bool,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub extractions: Vec<Extraction>,
    pub done_seen: bool,
    pub warnings: Vec<ParseWarning>,
    pub error: Option<ParseError>,
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Maximum names kept per document.
    pub cap: usize,
    /// Only tabs separate columns; space runs are part of the text.
    pub strict_tabs: bool,
    /// Run index stamped on every extraction.
    pub run: u32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            strict_tabs: false,
            run: 0,
        }
    }
}

fn is_done_word(token: &str) -> bool {
    token
        .trim_matches(|c: char| matches!(c, '*' | '.' | '`' | '!' | '"'))
        .eq_ignore_ascii_case("done")
}

fn is_header(line: &str) -> bool {
    matches!(
        normalize(line).as_str(),
        "pmid adjuvant name" | "nct number adjuvant name" | "nct id adjuvant name"
    )
}

struct Scanner<'a> {
    strict_tabs: bool,
    extra_id: Option<&'a str>,
    scan: TableScan,
    trailing_flagged: bool,
}

impl<'a> Scanner<'a> {
    fn is_id(&self, token: &str) -> bool {
        ID_TOKEN.is_match(token) || self.extra_id.is_some_and(|id| token.eq_ignore_ascii_case(id))
    }

    fn warn(&mut self, w: ParseWarning) {
        self.scan.warnings.push(w);
    }

    fn trailing(&mut self) {
        if !self.trailing_flagged {
            self.trailing_flagged = true;
            self.warn(ParseWarning::TrailingContentAfterDone);
        }
    }

    fn fields<'l>(&self, line: &'l str) -> Vec<&'l str> {
        let parts: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else if !self.strict_tabs {
            SPACE_RUN.split(line).collect()
        } else {
            vec![line]
        };
        parts.into_iter().map(str::trim).filter(|f| !f.is_empty()).collect()
    }

    fn line(&mut self, line: &str) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return;
        }
        if self.scan.done_seen {
            self.trailing();
            return;
        }
        if is_done_word(trimmed) {
            self.scan.done_seen = true;
            return;
        }
        if is_header(trimmed) {
            self.warn(ParseWarning::HeaderRowSkipped);
            return;
        }

        let fields = self.fields(line);
        let has_id = |s: &str| s.split_whitespace().any(|t| self.is_id(t));
        if fields.len() == 2 && !has_id(fields[1]) && !is_done_word(fields[1]) {
            self.push(fields[0], fields[1]);
        } else if !self.strict_tabs
            && (has_id(trimmed) || trimmed.split_whitespace().next().is_some_and(is_done_word))
        {
            self.stream(trimmed);
        } else if fields.len() > 2 {
            self.push(fields[0], fields[1]);
        }
    }

    fn push(&mut self, id: &str, name: &str) {
        self.scan.rows.push((id.to_owned(), name.to_owned()));
    }

    fn flush(&mut self, segment: Option<(&str, Vec<&str>)>) {
        let Some((id, words)) = segment else { return };
        if words.is_empty() {
            return;
        }
        let name = words.join(" ");
        if normalize(&name) == "adjuvant name" {
            self.warn(ParseWarning::HeaderRowSkipped);
        } else {
            self.push(id, &name);
        }
    }

    /// Re-segment a flattened line at identifier tokens.
    fn stream(&mut self, line: &str) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let mut prefix: Vec<&str> = Vec::new();
        let mut current: Option<(&str, Vec<&str>)> = None;

        for (i, &tok) in tokens.iter().enumerate() {
            if is_done_word(tok) && (i == 0 || current.is_some()) {
                self.flush(current.take());
                self.scan.done_seen = true;
                if i + 1 < tokens.len() {
                    self.trailing();
                }
                return;
            }
            if self.is_id(tok) {
                self.flush(current.take());
                current = Some((tok, Vec::new()));
                continue;
            }
            match current.as_mut() {
                Some((_, words)) => words.push(tok),
                None => prefix.push(tok),
            }
        }
        self.flush(current);
        if normalize(&prefix.join(" ")).ends_with("adjuvant name") {
            self.warn(ParseWarning::HeaderRowSkipped);
        }
    }
}

fn scan(raw: &str, strict_tabs: bool, extra_id: Option<&str>) -> TableScan {
    let mut scanner = Scanner {
        strict_tabs,
        extra_id,
        scan: TableScan::default(),
        trailing_flagged: false,
    };
    for line in raw.lines() {
        scanner.line(line);
    }
    scanner.scan
}

/// Pull table rows out of raw model text. Never fails; problems surface as
/// warnings.
pub fn extract_table(raw: &str) -> TableScan {
    scan(raw, false, None)
}

/// Extract, filter to `expected_id`, deduplicate case-insensitively and cap.
/// A response without `Done` is reported as incomplete and yields no
/// extractions.
pub fn parse_response(raw: &str, expected_id: &str, opts: &ParseOptions) -> ParseResult {
    if raw.trim().is_empty() {
        return ParseResult {
            error: Some(ParseError::EmptyResponse),
            ..Default::default()
        };
    }
    let TableScan {
        rows,
        done_seen,
        mut warnings,
    } = scan(raw, opts.strict_tabs, Some(expected_id.trim()));

    let mut seen = BTreeSet::new();
    let mut extractions = Vec::new();
    for (id, name) in rows {
        if !id.eq_ignore_ascii_case(expected_id.trim()) {
            warnings.push(ParseWarning::ForeignIdDropped);
            continue;
        }
        if !seen.insert(normalize(&name)) {
            warnings.push(ParseWarning::DuplicateRowDropped);
            continue;
        }
        if extractions.len() == opts.cap {
            warnings.push(ParseWarning::OverCapTruncated);
            continue;
        }
        extractions.push(Extraction::new(expected_id, name, opts.run));
    }

    if !done_seen {
        return ParseResult {
            extractions: Vec::new(),
            done_seen,
            warnings,
            error: Some(ParseError::MissingDoneMarker),
        };
    }
    ParseResult {
        extractions,
        done_seen,
        warnings,
        error: None,
    }
}

/// Canonical table form: one `id<TAB>name` row per extraction, then `Done`.
pub fn canonical_table(extractions: &[Extraction]) -> String {
    let mut out = String::new();
    for e in extractions {
        out.push_str(&e.doc_id);
        out.push('\t');
        out.push_str(&e.name);
        out.push('\n');
    }
    out.push_str("Done\n");
    out
}
