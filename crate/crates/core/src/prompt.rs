//! Prompt rendering.
//!
//! A prompt is the fixed instruction body for the dataset kind, an
//! optional `### Examples:` section, and a `### Task Input:` section whose
//! last line is the target document. The instruction bodies are kept
//! verbatim in `assets/`, including their disagreement about whether two or
//! three names are allowed; the cap is enforced when parsing responses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DocumentKind, DocumentRecord, GoldSet};

const ABSTRACT_INSTRUCTIONS: &str = include_str!("../assets/abstract_instructions.txt");
const TRIAL_INSTRUCTIONS: &str = include_str!("../assets/trial_instructions.txt");

pub const MAX_SHOTS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("record {id} has no context list but the prompt asks for one")]
    MissingContext { id: String },
    #[error("expected {expected} examples, got {got}")]
    ShotMismatch { expected: u8, got: usize },
    #[error("target {id} is also one of the few-shot examples")]
    TargetInExamples { id: String },
    #[error("example pool has {available} usable entries, {needed} needed")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("shot count {0} outside 0..={MAX_SHOTS}")]
    InvalidShots(u8),
    #[error("record {id} is a {found} but the prompt is for {expected} data")]
    KindMismatch {
        id: String,
        expected: DocumentKind,
        found: DocumentKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    With,
    Without,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::With => "with",
            ContextMode::Without => "without",
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "with" => Ok(ContextMode::With),
            "without" => Ok(ContextMode::Without),
            other => Err(format!("unknown context mode {other:?} (expected with or without)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub kind: DocumentKind,
    pub context_mode: ContextMode,
    shots: u8,
    pub example_pool_id: String,
}

impl PromptConfig {
    pub fn new(kind: DocumentKind, context_mode: ContextMode, shots: u8) -> Result<Self, PromptError> {
        if shots > MAX_SHOTS {
            return Err(PromptError::InvalidShots(shots));
        }
        Ok(Self {
            kind,
            context_mode,
            shots,
            example_pool_id: "gold".to_owned(),
        })
    }

    pub fn with_pool_id(mut self, id: impl Into<String>) -> Self {
        self.example_pool_id = id.into();
        self
    }

    pub fn shots(&self) -> u8 {
        self.shots
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub doc_id: String,
    pub input_line: String,
    pub expected_rows: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub config: PromptConfig,
    pub target_id: String,
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\r', '\n'], " ")
}

/// `s` on one line, ending in exactly one period.
fn sentence(s: &str) -> String {
    format!("{}.", one_line(s).trim_end().trim_end_matches('.'))
}

/// The tab-separated input line for one document.
pub fn render_task_input(record: &DocumentRecord, mode: ContextMode) -> Result<String, PromptError> {
    let body_label = match record.kind {
        DocumentKind::Abstract => "Abstract",
        DocumentKind::Trial => "Brief Description",
    };
    let mut line = format!(
        "{}\tTitle: {} {}: {}",
        one_line(&record.id),
        sentence(&record.title),
        body_label,
        sentence(&record.body)
    );
    if mode == ContextMode::With {
        let items = record
            .context
            .as_ref()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| PromptError::MissingContext {
                id: record.id.clone(),
            })?;
        let joined: Vec<String> = items.iter().map(|i| one_line(i)).collect();
        line.push_str(&format!(" {}: {}", record.kind.context_label(), sentence(&joined.join(", "))));
    }
    Ok(line)
}

pub fn instructions(kind: DocumentKind) -> &'static str {
    match kind {
        DocumentKind::Abstract => ABSTRACT_INSTRUCTIONS,
        DocumentKind::Trial => TRIAL_INSTRUCTIONS,
    }
}

fn input_header(kind: DocumentKind) -> &'static str {
    match kind {
        DocumentKind::Abstract => "PMID\tArticle",
        DocumentKind::Trial => "NCT Number\tTrial Data",
    }
}

pub fn render_prompt(
    record: &DocumentRecord,
    config: &PromptConfig,
    examples: &[FewShotExample],
) -> Result<PromptBundle, PromptError> {
    if record.kind != config.kind {
        return Err(PromptError::KindMismatch {
            id: record.id.clone(),
            expected: config.kind,
            found: record.kind,
        });
    }
    if examples.len() != config.shots as usize {
        return Err(PromptError::ShotMismatch {
            expected: config.shots,
            got: examples.len(),
        });
    }
    if let Some(ex) = examples.iter().find(|e| e.doc_id == record.id) {
        return Err(PromptError::TargetInExamples { id: ex.doc_id.clone() });
    }

    let input_line = render_task_input(record, config.context_mode)?;
    let mut text = String::from(instructions(config.kind));
    if !examples.is_empty() {
        text.push_str("### Examples:\n");
        for (i, ex) in examples.iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            text.push_str(&ex.input_line);
            text.push('\n');
            for (id, name) in &ex.expected_rows {
                text.push_str(&format!("{id}\t{name}\n"));
            }
            text.push_str("Done\n");
        }
        text.push_str("---\n");
    }
    text.push_str("### Task Input:\n.....\n");
    text.push_str(input_header(config.kind));
    text.push('\n');
    text.push_str(&input_line);

    Ok(PromptBundle {
        text,
        config: config.clone(),
        target_id: record.id.clone(),
    })
}

/// One candidate few-shot source: a document and its gold names.
pub type PoolEntry = (DocumentRecord, Vec<String>);

/// Every corpus record that has gold names, in corpus order.
pub fn build_pool(records: &[DocumentRecord], gold: &GoldSet) -> Vec<PoolEntry> {
    records
        .iter()
        .filter(|r| !gold.names(&r.id).is_empty())
        .map(|r| (r.clone(), gold.names(&r.id).to_vec()))
        .collect()
}

/// Pick the first `k` usable pool entries by ascending id, skipping
/// `exclude_id`, entries without gold names, and entries that cannot be
/// rendered in `mode`.
pub fn select_examples(
    pool: &[PoolEntry],
    k: usize,
    exclude_id: &str,
    mode: ContextMode,
) -> Result<Vec<FewShotExample>, PromptError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut ordered: Vec<&PoolEntry> = pool.iter().collect();
    ordered.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let usable: Vec<FewShotExample> = ordered
        .into_iter()
        .filter(|(rec, names)| rec.id != exclude_id && !names.is_empty())
        .filter_map(|(rec, names)| {
            let input_line = render_task_input(rec, mode).ok()?;
            Some(FewShotExample {
                doc_id: rec.id.clone(),
                input_line,
                expected_rows: names
                    .iter()
                    .map(|n| (one_line(&rec.id), one_line(n)))
                    .collect(),
            })
        })
        .take(k)
        .collect();

    if usable.len() < k {
        return Err(PromptError::PoolTooSmall {
            needed: k,
            available: usable.len(),
        });
    }
    Ok(usable)
}
