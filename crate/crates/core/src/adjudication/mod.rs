//! Human review of stable mismatches.
//!
//! Each case collects up to three verdicts from distinct reviewers:
//!
//! ```text
//! Pending --1st--> SingleReview --2nd, same decision--> Agreed
//!                               --2nd, different------> Disputed --3rd--> Adjudicated
//! ```
//!
//! `Agreed` and `Adjudicated` are terminal and carry the final decision.
//! A verdict sent as a tie-break is only accepted on a disputed case.

mod http;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DocumentRecord;
use crate::gateway::sha256_hex;
use crate::postprocess::Extraction;
use crate::scoring::{normalize, FinalDecision};

pub use http::{router, serve, ReviewService};
pub use store::{AdjudicationStore, VerdictEvent, CASES_FILE, EVENTS_FILE};

/// Characters of document text kept on each side of the candidate name.
pub const EXCERPT_RADIUS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ValidAdjuvant,
    Invalid,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::ValidAdjuvant => "valid_adjuvant",
            Decision::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseStatus {
    Pending,
    SingleReview,
    Agreed,
    Disputed,
    Adjudicated,
}

impl CaseStatus {
    pub const ALL: [CaseStatus; 5] = [
        CaseStatus::Pending,
        CaseStatus::SingleReview,
        CaseStatus::Agreed,
        CaseStatus::Disputed,
        CaseStatus::Adjudicated,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, CaseStatus::Agreed | CaseStatus::Adjudicated)
    }
}

impl std::str::FromStr for CaseStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaseStatus::ALL
            .into_iter()
            .find(|st| format!("{st:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown case status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub reviewer_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub gold_linkage: Option<String>,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationCase {
    pub case_id: String,
    pub extraction: Extraction,
    pub source_excerpt: String,
    pub gold_names: Vec<String>,
    pub status: CaseStatus,
    pub verdicts: Vec<Verdict>,
    #[serde(rename = "final")]
    pub final_decision: Option<Decision>,
}

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("reviewer {reviewer} already reviewed case {case_id}")]
    DuplicateReviewer { case_id: String, reviewer: String },
    #[error("case {0} is closed")]
    CaseClosed(String),
    #[error("case {0} is not disputed; tie-break verdicts are not accepted yet")]
    PrematureAdjudication(String),
    #[error("an invalid decision needs a reason")]
    MissingReason,
    #[error("reviewer id is empty")]
    EmptyReviewer,
    #[error("case for {doc_id}/{name} already exists")]
    DuplicateCase { doc_id: String, name: String },
    #[error("adjudication store: {0}")]
    Io(#[from] std::io::Error),
    #[error("adjudication store is corrupt: {0}")]
    Corrupt(String),
}

/// Stable case id for a `(doc_id, name)` pair.
pub fn case_id_for(doc_id: &str, name: &str) -> String {
    let digest = sha256_hex(format!("{doc_id}\0{}", normalize(name)).as_bytes());
    format!("case-{}", &digest[..12])
}

/// Up to [`EXCERPT_RADIUS`] characters either side of the first
/// case-insensitive occurrence of `name` in title and body; the title when
/// the name does not occur.
pub fn source_excerpt(record: &DocumentRecord, name: &str) -> String {
    let fold = |c: char| c.to_lowercase().next().unwrap_or(c);
    let text: Vec<char> = format!("{}\n{}", record.title, record.body).chars().collect();
    let folded: Vec<char> = text.iter().copied().map(fold).collect();
    let needle: Vec<char> = name.trim().chars().map(fold).collect();
    if needle.is_empty() || needle.len() > folded.len() {
        return record.title.clone();
    }
    match folded.windows(needle.len()).position(|w| w == needle.as_slice()) {
        Some(pos) => {
            let start = pos.saturating_sub(EXCERPT_RADIUS);
            let end = (pos + needle.len() + EXCERPT_RADIUS).min(text.len());
            text[start..end].iter().collect()
        }
        None => record.title.clone(),
    }
}

/// One review case per distinct `(doc_id, normalized name)`, all pending,
/// ordered by case id.
pub fn create_cases(
    stable_mismatches: &[(Extraction, &DocumentRecord, &[String])],
) -> Vec<AdjudicationCase> {
    let mut by_id: BTreeMap<String, AdjudicationCase> = BTreeMap::new();
    for (extraction, record, gold) in stable_mismatches {
        let id = case_id_for(&extraction.doc_id, &extraction.name);
        by_id.entry(id.clone()).or_insert_with(|| AdjudicationCase {
            case_id: id,
            extraction: extraction.clone(),
            source_excerpt: source_excerpt(record, &extraction.name),
            gold_names: gold.to_vec(),
            status: CaseStatus::Pending,
            verdicts: Vec::new(),
            final_decision: None,
        });
    }
    by_id.into_values().collect()
}

impl AdjudicationCase {
    /// Apply one verdict in place.
    pub fn apply(&mut self, verdict: Verdict, tie_break: bool) -> Result<(), AdjudicationError> {
        if verdict.reviewer_id.trim().is_empty() {
            return Err(AdjudicationError::EmptyReviewer);
        }
        if verdict.decision == Decision::Invalid && verdict.reason.trim().is_empty() {
            return Err(AdjudicationError::MissingReason);
        }
        if self.status.is_terminal() {
            return Err(AdjudicationError::CaseClosed(self.case_id.clone()));
        }
        if tie_break && self.status != CaseStatus::Disputed {
            return Err(AdjudicationError::PrematureAdjudication(self.case_id.clone()));
        }
        if self.verdicts.iter().any(|v| v.reviewer_id == verdict.reviewer_id) {
            return Err(AdjudicationError::DuplicateReviewer {
                case_id: self.case_id.clone(),
                reviewer: verdict.reviewer_id,
            });
        }

        let decision = verdict.decision;
        self.verdicts.push(verdict);
        match self.status {
            CaseStatus::Pending => self.status = CaseStatus::SingleReview,
            CaseStatus::SingleReview => {
                if self.verdicts[0].decision == decision {
                    self.status = CaseStatus::Agreed;
                    self.final_decision = Some(decision);
                } else {
                    self.status = CaseStatus::Disputed;
                }
            }
            CaseStatus::Disputed => {
                self.status = CaseStatus::Adjudicated;
                self.final_decision = Some(decision);
            }
            CaseStatus::Agreed | CaseStatus::Adjudicated => unreachable!("terminal states rejected above"),
        }
        Ok(())
    }

    /// Check every structural rule on a case.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.verdicts.len();
        if n > 3 {
            return Err(format!("{n} verdicts"));
        }
        let reviewers: BTreeSet<&str> = self.verdicts.iter().map(|v| v.reviewer_id.as_str()).collect();
        if reviewers.len() != n {
            return Err("repeated reviewer".into());
        }
        let d = |i: usize| self.verdicts[i].decision;
        let ok = match self.status {
            CaseStatus::Pending => n == 0,
            CaseStatus::SingleReview => n == 1,
            CaseStatus::Agreed => n == 2 && d(0) == d(1) && self.final_decision == Some(d(1)),
            CaseStatus::Disputed => n == 2 && d(0) != d(1),
            CaseStatus::Adjudicated => n == 3 && self.final_decision == Some(d(2)),
        };
        if !ok {
            return Err(format!("status {:?} inconsistent with verdicts", self.status));
        }
        if self.final_decision.is_some() != self.status.is_terminal() {
            return Err("final decision set outside a terminal state".into());
        }
        Ok(())
    }

    pub fn final_export(&self) -> Option<FinalDecision> {
        let decision = self.final_decision?;
        let deciding = match self.status {
            CaseStatus::Adjudicated => self.verdicts.get(2),
            _ => self.verdicts.iter().rev().find(|v| v.gold_linkage.is_some()),
        };
        let gold_linkage = match decision {
            Decision::ValidAdjuvant => deciding.and_then(|v| v.gold_linkage.clone()),
            Decision::Invalid => None,
        };
        Some(FinalDecision {
            case_id: self.case_id.clone(),
            doc_id: self.extraction.doc_id.clone(),
            name: self.extraction.name.clone(),
            decision,
            gold_linkage,
        })
    }
}

/// In-memory set of cases keyed by case id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseBook {
    cases: BTreeMap<String, AdjudicationCase>,
}

impl CaseBook {
    pub fn new(cases: impl IntoIterator<Item = AdjudicationCase>) -> Result<Self, AdjudicationError> {
        let mut book = Self::default();
        for case in cases {
            book.insert(case)?;
        }
        Ok(book)
    }

    pub fn insert(&mut self, case: AdjudicationCase) -> Result<(), AdjudicationError> {
        if self.cases.contains_key(&case.case_id) {
            return Err(AdjudicationError::DuplicateCase {
                doc_id: case.extraction.doc_id,
                name: normalize(&case.extraction.name),
            });
        }
        self.cases.insert(case.case_id.clone(), case);
        Ok(())
    }

    pub fn get(&self, case_id: &str) -> Option<&AdjudicationCase> {
        self.cases.get(case_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &AdjudicationCase> {
        self.cases.values()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// The case as it would be after the verdict, without changing the book.
    pub fn preview(&self, case_id: &str, verdict: Verdict, tie_break: bool) -> Result<AdjudicationCase, AdjudicationError> {
        let mut case = self
            .cases
            .get(case_id)
            .cloned()
            .ok_or_else(|| AdjudicationError::UnknownCase(case_id.to_owned()))?;
        case.apply(verdict, tie_break)?;
        Ok(case)
    }

    pub(crate) fn commit(&mut self, case: AdjudicationCase) {
        self.cases.insert(case.case_id.clone(), case);
    }

    pub fn submit_verdict(&mut self, case_id: &str, verdict: Verdict, tie_break: bool) -> Result<AdjudicationCase, AdjudicationError> {
        let case = self.preview(case_id, verdict, tie_break)?;
        self.commit(case.clone());
        Ok(case)
    }

    /// Case count for every status, zeros included.
    pub fn progress(&self) -> BTreeMap<CaseStatus, usize> {
        let mut counts: BTreeMap<CaseStatus, usize> = CaseStatus::ALL.iter().map(|s| (*s, 0)).collect();
        for c in self.cases.values() {
            *counts.entry(c.status).or_default() += 1;
        }
        counts
    }

    /// Final decisions of closed cases, sorted by case id.
    pub fn export_verdicts(&self) -> Vec<FinalDecision> {
        self.cases.values().filter_map(AdjudicationCase::final_export).collect()
    }
}

/// Verdict export as JSON lines, one final decision per line.
pub fn export_to_jsonl(decisions: &[FinalDecision]) -> String {
    decisions
        .iter()
        .map(|d| serde_json::to_string(d).expect("plain data serializes") + "\n")
        .collect()
}

pub fn parse_export(text: &str) -> Result<Vec<FinalDecision>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
