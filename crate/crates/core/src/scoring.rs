//! Matching extractions against gold annotations and computing metrics.
//!
//! Automated validation is an exact, case-insensitive comparison: first
//! against the document's gold names, then through the synonym dictionary.
//! Anything generic (on the stoplist) is nonspecific; everything else that
//! fails to match is a mismatch and goes to human review.
//!
//! Two metric families are provided. The literal family is
//!
//! ```text
//! precision = (TP - nonspecific) / TP
//! recall    = TP / (total identifications + missed)
//! ```
//!
//! and the standard family uses `TP / (TP + FP)` and `TP / (TP + FN)` with
//! `FP = nonspecific + mismatches` and `FN = missed`. Both share the same
//! harmonic-mean F1. All metric functions are generic over [`Scalar`], so
//! the same code runs in `f64` and in exact rationals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudication::Decision;
use crate::corpus::{GoldSet, SynonymDictionary};
use crate::postprocess::Extraction;
use crate::ExactMetric;

/// Numeric types the metric functions can be evaluated in.
pub trait Scalar: Num + Copy + PartialOrd + FromPrimitive + fmt::Debug {}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + FromPrimitive + fmt::Debug {}

/// Case-fold, collapse whitespace runs to one space and trim.
pub fn normalize(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for word in name.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchClass {
    TruePositive,
    Nonspecific,
    Mismatch,
}

impl MatchClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchClass::TruePositive => "TruePositive",
            MatchClass::Nonspecific => "Nonspecific",
            MatchClass::Mismatch => "Mismatch",
        }
    }
}

impl fmt::Display for MatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TruePositive" => Ok(MatchClass::TruePositive),
            "Nonspecific" => Ok(MatchClass::Nonspecific),
            "Mismatch" => Ok(MatchClass::Mismatch),
            other => Err(format!("unknown match class {other:?}")),
        }
    }
}

/// Classification of one extraction.
///
/// For automated outcomes `class == TruePositive` exactly when
/// `matched_gold` is set. A mismatch later validated by reviewers becomes a
/// true positive with `manually_validated` set; if the reviewers linked it
/// to no gold name it stays without `matched_gold` and counts as valid but
/// unlisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub extraction: Extraction,
    pub class: MatchClass,
    pub matched_gold: Option<String>,
    pub canonical: Option<String>,
    #[serde(default)]
    pub manually_validated: bool,
}

impl MatchOutcome {
    /// `(doc_id, normalized name)`, the identity used by adjudication.
    pub fn key(&self) -> (String, String) {
        (self.extraction.doc_id.clone(), normalize(&self.extraction.name))
    }

    pub fn valid_but_unlisted(&self) -> bool {
        self.manually_validated && self.matched_gold.is_none()
    }
}

/// Classify one extraction. Tests run in order: stoplist, direct gold
/// match, dictionary-mediated gold match, mismatch.
pub fn match_extraction(
    extraction: &Extraction,
    gold: &GoldSet,
    dict: &SynonymDictionary,
) -> MatchOutcome {
    let key = normalize(&extraction.name);
    let outcome = |class, matched_gold: Option<&str>, canonical: Option<&str>| MatchOutcome {
        extraction: extraction.clone(),
        class,
        matched_gold: matched_gold.map(str::to_owned),
        canonical: canonical.map(str::to_owned),
        manually_validated: false,
    };

    if dict.is_nonspecific(&key) {
        return outcome(MatchClass::Nonspecific, None, None);
    }
    let names = gold.names(&extraction.doc_id);
    if let Some(g) = names.iter().find(|g| normalize(g) == key) {
        return outcome(MatchClass::TruePositive, Some(g), None);
    }
    if let Some(canonical) = dict.canonical(&key) {
        let canonical_key = normalize(canonical);
        if let Some(g) = names.iter().find(|g| normalize(g) == canonical_key) {
            return outcome(MatchClass::TruePositive, Some(g), Some(canonical));
        }
    }
    outcome(MatchClass::Mismatch, None, None)
}

pub fn match_all(
    extractions: &[Extraction],
    gold: &GoldSet,
    dict: &SynonymDictionary,
) -> Vec<MatchOutcome> {
    extractions
        .iter()
        .map(|e| match_extraction(e, gold, dict))
        .collect()
}

/// Aggregated counts for one configuration.
///
/// `true_positives + nonspecific + mismatches == total_identifications`
/// always holds. `valid_unlisted` counts reviewer-validated outcomes that
/// cover no gold name; they are already included in `true_positives`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricCounts {
    pub total_identifications: u64,
    pub true_positives: u64,
    pub nonspecific: u64,
    pub mismatches: u64,
    pub missed: u64,
    pub valid_unlisted: u64,
}

impl MetricCounts {
    pub fn is_conserved(&self) -> bool {
        self.true_positives + self.nonspecific + self.mismatches == self.total_identifications
    }
}

/// Fold outcomes into counts. `missed` is the number of distinct
/// `(doc, gold name)` pairs no true positive covers.
pub fn tally(outcomes: &[MatchOutcome], gold: &GoldSet) -> MetricCounts {
    let mut counts = MetricCounts::default();
    let mut covered: BTreeSet<(&str, String)> = BTreeSet::new();

    for o in outcomes {
        counts.total_identifications += 1;
        match o.class {
            MatchClass::TruePositive => {
                counts.true_positives += 1;
                let doc = o.extraction.doc_id.as_str();
                let hit = o.matched_gold.as_deref().map(normalize).filter(|m| {
                    gold.names(doc).iter().any(|g| normalize(g) == *m)
                });
                match hit {
                    Some(m) => {
                        covered.insert((doc, m));
                    }
                    None if o.manually_validated => counts.valid_unlisted += 1,
                    None => {}
                }
            }
            MatchClass::Nonspecific => counts.nonspecific += 1,
            MatchClass::Mismatch => counts.mismatches += 1,
        }
    }

    for (doc, names) in gold.iter() {
        let distinct: BTreeSet<String> = names.iter().map(|n| normalize(n)).collect();
        counts.missed += distinct
            .into_iter()
            .filter(|n| !covered.contains(&(doc, n.clone())))
            .count() as u64;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{0} is undefined for these counts")]
    Undefined(&'static str),
    #[error("metric inputs must lie in [0, 1]")]
    OutOfRange,
}

fn ratio<T: Scalar>(num: u64, den: u64, what: &'static str) -> Result<T, MetricError> {
    if den == 0 {
        return Err(MetricError::Undefined(what));
    }
    let n = T::from_u64(num).ok_or(MetricError::OutOfRange)?;
    let d = T::from_u64(den).ok_or(MetricError::OutOfRange)?;
    Ok(n / d)
}

/// `(TP - nonspecific) / TP`. Fails with `OutOfRange` when nonspecific
/// outputs outnumber true positives, since the value would be negative.
pub fn precision_paper<T: Scalar>(c: &MetricCounts) -> Result<T, MetricError> {
    if c.true_positives == 0 {
        return Err(MetricError::Undefined("precision"));
    }
    if c.nonspecific > c.true_positives {
        return Err(MetricError::OutOfRange);
    }
    let tp = T::from_u64(c.true_positives).ok_or(MetricError::OutOfRange)?;
    let ns = T::from_u64(c.nonspecific).ok_or(MetricError::OutOfRange)?;
    Ok((tp - ns) / tp)
}

/// `TP / (total identifications + missed)`.
pub fn recall_paper<T: Scalar>(c: &MetricCounts) -> Result<T, MetricError> {
    ratio(
        c.true_positives,
        c.total_identifications + c.missed,
        "recall",
    )
}

/// `TP / (TP + nonspecific + mismatches)`.
pub fn precision_standard<T: Scalar>(c: &MetricCounts) -> Result<T, MetricError> {
    ratio(
        c.true_positives,
        c.true_positives + c.nonspecific + c.mismatches,
        "precision",
    )
}

/// `TP / (TP + missed)`.
pub fn recall_standard<T: Scalar>(c: &MetricCounts) -> Result<T, MetricError> {
    ratio(c.true_positives, c.true_positives + c.missed, "recall")
}

/// Harmonic mean of precision and recall.
pub fn f1<T: Scalar>(p: T, r: T) -> Result<T, MetricError> {
    let (zero, one) = (T::zero(), T::one());
    let in_unit = |x: T| x >= zero && x <= one;
    if !in_unit(p) || !in_unit(r) {
        return Err(MetricError::OutOfRange);
    }
    let sum = p + r;
    if sum == zero {
        return Err(MetricError::Undefined("F1"));
    }
    let two = one + one;
    Ok(two * p * r / sum)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    #[default]
    Literal,
    Standard,
}

impl MetricMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::Literal => "literal",
            MetricMode::Standard => "standard",
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "literal" => Ok(MetricMode::Literal),
            "standard" => Ok(MetricMode::Standard),
            other => Err(format!("unknown metric mode {other:?} (expected literal or standard)")),
        }
    }
}

pub fn precision<T: Scalar>(c: &MetricCounts, mode: MetricMode) -> Result<T, MetricError> {
    match mode {
        MetricMode::Literal => precision_paper(c),
        MetricMode::Standard => precision_standard(c),
    }
}

pub fn recall<T: Scalar>(c: &MetricCounts, mode: MetricMode) -> Result<T, MetricError> {
    match mode {
        MetricMode::Literal => recall_paper(c),
        MetricMode::Standard => recall_standard(c),
    }
}

/// Precision, recall and F1 for one set of counts. Undefined values are
/// `None`, never coerced to 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores<T> {
    pub precision: Option<T>,
    pub recall: Option<T>,
    pub f1: Option<T>,
}

pub fn scores<T: Scalar>(c: &MetricCounts, mode: MetricMode) -> Scores<T> {
    let precision = precision(c, mode).ok();
    let recall = recall(c, mode).ok();
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => f1(p, r).ok(),
        _ => None,
    };
    Scores {
        precision,
        recall,
        f1,
    }
}

/// A final reviewer decision on one `(doc_id, normalized name)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub case_id: String,
    pub doc_id: String,
    pub name: String,
    pub decision: Decision,
    pub gold_linkage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("verdict for {doc_id}/{name} targets a non-mismatch outcome")]
    VerdictForNonMismatch { doc_id: String, name: String },
    #[error("more than one verdict for {doc_id}/{name}")]
    DuplicateVerdict { doc_id: String, name: String },
    #[error("verdict for {doc_id}/{name} matches no outcome")]
    UnmatchedVerdict { doc_id: String, name: String },
}

/// Reclassify reviewed mismatches. Valid verdicts become true positives
/// carrying the verdict's gold linkage; invalid ones leave the outcome
/// untouched.
pub fn apply_verdicts(
    outcomes: &[MatchOutcome],
    verdicts: &[FinalDecision],
) -> Result<Vec<MatchOutcome>, VerdictError> {
    let mut by_key: BTreeMap<(String, String), &FinalDecision> = BTreeMap::new();
    for v in verdicts {
        let key = (v.doc_id.clone(), normalize(&v.name));
        if by_key.insert(key.clone(), v).is_some() {
            return Err(VerdictError::DuplicateVerdict {
                doc_id: key.0,
                name: key.1,
            });
        }
    }

    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut adjusted = outcomes.to_vec();
    for o in adjusted.iter_mut() {
        let key = o.key();
        let Some(v) = by_key.get(&key) else { continue };
        if o.class != MatchClass::Mismatch {
            return Err(VerdictError::VerdictForNonMismatch {
                doc_id: key.0,
                name: key.1,
            });
        }
        seen.insert(key);
        if v.decision == Decision::ValidAdjuvant {
            o.class = MatchClass::TruePositive;
            o.matched_gold = v.gold_linkage.clone();
            o.manually_validated = true;
        }
    }

    if let Some((doc_id, name)) = by_key.into_keys().find(|k| !seen.contains(k)) {
        return Err(VerdictError::UnmatchedVerdict { doc_id, name });
    }
    Ok(adjusted)
}

/// A percentage held as an integer number of hundredths of a percent, so
/// `5080` is `50.80%`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Percent(pub i64);

impl Percent {
    /// Round a fraction in `[0, 1]` half-up to two decimals of a percent.
    pub fn from_fraction(x: ExactMetric) -> Self {
        let scaled = x * ExactMetric::from_integer(10_000) + ExactMetric::new(1, 2);
        Percent(scaled.floor().to_integer())
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn as_fraction(self) -> ExactMetric {
        ExactMetric::new(self.0, 10_000)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let v = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", v / 100, v % 100)
    }
}

impl FromStr for Percent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("malformed percentage {s:?}");
        let (neg, digits) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = digits.split_once('.').unwrap_or((digits, "0"));
        if int.is_empty() || frac.is_empty() || frac.len() > 2 {
            return Err(bad());
        }
        let int: i64 = int.parse().map_err(|_| bad())?;
        let mut frac_v: i64 = frac.parse().map_err(|_| bad())?;
        if frac.len() == 1 {
            frac_v *= 10;
        }
        let v = int * 100 + frac_v;
        Ok(Percent(if neg { -v } else { v }))
    }
}
