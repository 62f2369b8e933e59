//! Document collections, gold annotations and the synonym dictionary.
//!
//! All four inputs are UTF-8 tab-separated text. Trials and abstracts carry
//! a mandatory header row; gold files are bare `id<TAB>name` rows; the
//! dictionary is `surface<TAB>canonical` rows with an optional `[stoplist]`
//! section. Cells are trimmed at both ends, inner whitespace is kept.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::normalize;

/// Generic terms classed as nonspecific when a dictionary file does not
/// declare its own stoplist.
pub const DEFAULT_STOPLIST: [&str; 3] = ["adjuvant", "vaccine adjuvant", "immunostimulant"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited text: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: missing column {column:?}")]
    MissingColumn { column: String, line: u64 },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { id: String, line: u64 },
    #[error("line {line}: empty {field}")]
    EmptyField { field: String, line: u64 },
    #[error("line {line}: empty adjuvant name")]
    EmptyName { line: u64 },
    #[error("line {line}: expected {expected} tab-separated columns, found {found}")]
    UnknownFormat {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("surface form {surface:?} maps to both {existing:?} and {new:?}")]
    ConflictingMapping {
        surface: String,
        existing: String,
        new: String,
    },
    #[error("{term:?} is both a stoplist term and a mapped surface form")]
    StoplistOverlap { term: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentKind {
    Abstract,
    Trial,
}

impl DocumentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentKind::Abstract => "abstract",
            DocumentKind::Trial => "trial",
        }
    }

    /// Column header of the identifier in input files and model output.
    pub fn id_label(self) -> &'static str {
        match self {
            DocumentKind::Abstract => "PMID",
            DocumentKind::Trial => "NCT Number",
        }
    }

    pub fn context_label(self) -> &'static str {
        match self {
            DocumentKind::Abstract => "Substances",
            DocumentKind::Trial => "Interventions",
        }
    }

    fn columns(self) -> [&'static str; 4] {
        match self {
            DocumentKind::Abstract => ["PMID", "Title", "Abstract", "Substances"],
            DocumentKind::Trial => ["NCT Number", "Title", "Brief Summary", "Interventions"],
        }
    }
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DocumentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "abstract" | "abstracts" => Ok(DocumentKind::Abstract),
            "trial" | "trials" => Ok(DocumentKind::Trial),
            other => Err(format!("unknown dataset type {other:?} (expected abstract or trial)")),
        }
    }
}

/// One trial or abstract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub kind: DocumentKind,
    pub title: String,
    /// Abstract text or the trial's brief summary.
    pub body: String,
    /// Substances (abstracts) or interventions (trials).
    pub context: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Separator between items of the substances/interventions cell.
    pub context_delimiter: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            context_delimiter: "|".to_owned(),
        }
    }
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<DocumentRecord>, CorpusError> {
    load_documents(path, DocumentKind::Trial, &LoadOptions::default())
}

pub fn load_abstracts(path: impl AsRef<Path>) -> Result<Vec<DocumentRecord>, CorpusError> {
    load_documents(path, DocumentKind::Abstract, &LoadOptions::default())
}

pub fn load_documents(
    path: impl AsRef<Path>,
    kind: DocumentKind,
    opts: &LoadOptions,
) -> Result<Vec<DocumentRecord>, CorpusError> {
    let text = read(path.as_ref())?;
    parse_documents(&text, kind, opts)
}

/// Parse a trials or abstracts table held in memory.
pub fn parse_documents(
    text: &str,
    kind: DocumentKind,
    opts: &LoadOptions,
) -> Result<Vec<DocumentRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let columns = kind.columns();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(columns) {
        *slot = header
            .iter()
            .position(|h| *h == name.to_ascii_lowercase())
            .ok_or_else(|| CorpusError::MissingColumn {
                column: name.to_owned(),
                line: 1,
            })?;
    }

    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let cell = |i: usize| -> Result<&str, CorpusError> {
            row.get(index[i])
                .map(str::trim)
                .ok_or_else(|| CorpusError::MissingColumn {
                    column: columns[i].to_owned(),
                    line,
                })
        };
        let (id, title, body, context) = (cell(0)?, cell(1)?, cell(2)?, cell(3)?);
        for (value, field) in [(id, columns[0]), (title, columns[1]), (body, columns[2])] {
            if value.is_empty() {
                return Err(CorpusError::EmptyField {
                    field: field.to_owned(),
                    line,
                });
            }
        }
        if !seen.insert(id.to_owned()) {
            return Err(CorpusError::DuplicateId {
                id: id.to_owned(),
                line,
            });
        }
        let items: Vec<String> = context
            .split(opts.context_delimiter.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
        records.push(DocumentRecord {
            id: id.to_owned(),
            kind,
            title: title.to_owned(),
            body: body.to_owned(),
            context: (!items.is_empty()).then_some(items),
        });
    }
    Ok(records)
}

/// Reference annotations: document id to its gold adjuvant names.
///
/// Names are kept in first-seen order and deduplicated under
/// [`normalize`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSet {
    entries: BTreeMap<String, Vec<String>>,
}

impl GoldSet {
    /// Add a name; returns false when it was already present.
    pub fn insert(&mut self, doc_id: &str, name: &str) -> bool {
        let names = self.entries.entry(doc_id.to_owned()).or_default();
        let key = normalize(name);
        if names.iter().any(|n| normalize(n) == key) {
            return false;
        }
        names.push(name.trim().to_owned());
        true
    }

    pub fn names(&self, doc_id: &str) -> &[String] {
        self.entries.get(doc_id).map_or(&[], Vec::as_slice)
    }

    pub fn contains_doc(&self, doc_id: &str) -> bool {
        self.entries.contains_key(doc_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_names(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Restrict to the given documents.
    pub fn restricted_to<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> GoldSet {
        let keep: BTreeSet<&str> = ids.into_iter().collect();
        GoldSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

pub fn load_gold(path: impl AsRef<Path>) -> Result<GoldSet, CorpusError> {
    parse_gold(&read(path.as_ref())?)
}

pub fn parse_gold(text: &str) -> Result<GoldSet, CorpusError> {
    let mut gold = GoldSet::default();
    for (n, raw) in text.lines().enumerate() {
        let line = n as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(CorpusError::UnknownFormat {
                line,
                expected: 2,
                found: fields.len(),
            });
        }
        if fields[1].is_empty() {
            return Err(CorpusError::EmptyName { line });
        }
        if fields[2..].iter().any(|f| !f.is_empty()) {
            return Err(CorpusError::UnknownFormat {
                line,
                expected: 2,
                found: fields.len(),
            });
        }
        if fields[0].is_empty() {
            return Err(CorpusError::EmptyField {
                field: "document id".to_owned(),
                line,
            });
        }
        gold.insert(fields[0], fields[1]);
    }
    Ok(gold)
}

/// Normalized surface forms to canonical adjuvant names, plus the
/// stoplist of generic terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymDictionary {
    surface_to_canonical: BTreeMap<String, String>,
    stoplist: BTreeSet<String>,
}

impl Default for SynonymDictionary {
    /// No mappings, seeded stoplist.
    fn default() -> Self {
        Self::with_stoplist(DEFAULT_STOPLIST)
    }
}

impl SynonymDictionary {
    /// No mappings and no stoplist.
    pub fn empty() -> Self {
        Self {
            surface_to_canonical: BTreeMap::new(),
            stoplist: BTreeSet::new(),
        }
    }

    pub fn with_stoplist<'a>(terms: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            surface_to_canonical: BTreeMap::new(),
            stoplist: terms.into_iter().map(normalize).collect(),
        }
    }

    pub fn insert_mapping(&mut self, surface: &str, canonical: &str) -> Result<(), CorpusError> {
        let key = normalize(surface);
        let canonical = canonical.trim();
        if self.stoplist.contains(&key) {
            return Err(CorpusError::StoplistOverlap { term: key });
        }
        match self.surface_to_canonical.get(&key) {
            Some(existing) if normalize(existing) != normalize(canonical) => {
                Err(CorpusError::ConflictingMapping {
                    surface: key,
                    existing: existing.clone(),
                    new: canonical.to_owned(),
                })
            }
            Some(_) => Ok(()),
            None => {
                self.surface_to_canonical.insert(key, canonical.to_owned());
                Ok(())
            }
        }
    }

    pub fn insert_stopword(&mut self, term: &str) -> Result<(), CorpusError> {
        let key = normalize(term);
        if self.surface_to_canonical.contains_key(&key) {
            return Err(CorpusError::StoplistOverlap { term: key });
        }
        self.stoplist.insert(key);
        Ok(())
    }

    /// Canonical name for a surface form, compared after normalization.
    pub fn canonical(&self, surface: &str) -> Option<&str> {
        self.surface_to_canonical
            .get(&normalize(surface))
            .map(String::as_str)
    }

    pub fn is_nonspecific(&self, name: &str) -> bool {
        self.stoplist.contains(&normalize(name))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.surface_to_canonical.keys().map(String::as_str)
    }

    pub fn stoplist(&self) -> impl Iterator<Item = &str> {
        self.stoplist.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.surface_to_canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_to_canonical.is_empty()
    }
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<SynonymDictionary, CorpusError> {
    parse_dictionary(&read(path.as_ref())?)
}

/// Parse a dictionary file. Lines starting with `#` are comments. Rows
/// before any section header, or under `[mappings]`, are
/// `surface<TAB>canonical`; rows under `[stoplist]` are single terms. A file
/// without a `[stoplist]` section gets [`DEFAULT_STOPLIST`].
pub fn parse_dictionary(text: &str) -> Result<SynonymDictionary, CorpusError> {
    enum Section {
        Mappings,
        Stoplist,
    }
    let mut mappings: Vec<(u64, String, String)> = Vec::new();
    let mut stop: Option<Vec<String>> = None;
    let mut section = Section::Mappings;

    for (n, raw) in text.lines().enumerate() {
        let line = n as u64 + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match trimmed.to_ascii_lowercase().as_str() {
            "[mappings]" => {
                section = Section::Mappings;
                continue;
            }
            "[stoplist]" => {
                section = Section::Stoplist;
                stop.get_or_insert_with(Vec::new);
                continue;
            }
            _ => {}
        }
        match section {
            Section::Stoplist => stop.get_or_insert_with(Vec::new).push(trimmed.to_owned()),
            Section::Mappings => {
                let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
                if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
                    return Err(CorpusError::UnknownFormat {
                        line,
                        expected: 2,
                        found: fields.iter().filter(|f| !f.is_empty()).count(),
                    });
                }
                mappings.push((line, fields[0].to_owned(), fields[1].to_owned()));
            }
        }
    }

    let mut dict = match &stop {
        Some(terms) => SynonymDictionary::with_stoplist(terms.iter().map(String::as_str)),
        None => SynonymDictionary::default(),
    };
    for (_, surface, canonical) in &mappings {
        dict.insert_mapping(surface, canonical)?;
    }
    Ok(dict)
}

/// Cross-check of corpus ids against gold ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusReport {
    /// Gold ids with no corpus record.
    pub missing_from_corpus: Vec<String>,
    /// Corpus ids with no gold entry.
    pub unannotated: Vec<String>,
    /// Gold ids present in the corpus.
    pub matched: Vec<String>,
}

impl CorpusReport {
    pub fn is_clean(&self) -> bool {
        self.missing_from_corpus.is_empty() && self.unannotated.is_empty()
    }
}

pub fn validate_corpus(records: &[DocumentRecord], gold: &GoldSet) -> CorpusReport {
    let corpus_ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let (matched, missing): (Vec<&str>, Vec<&str>) =
        gold.doc_ids().partition(|id| corpus_ids.contains(id));
    CorpusReport {
        missing_from_corpus: missing.into_iter().map(str::to_owned).collect(),
        unannotated: records
            .iter()
            .filter(|r| !gold.contains_doc(&r.id))
            .map(|r| r.id.clone())
            .collect(),
        matched: matched.into_iter().map(str::to_owned).collect(),
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
