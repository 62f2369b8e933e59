//! Published result tables and an F1 self-consistency check over them.
//!
//! Every row holds precision, recall and F1 exactly as printed. The check
//! recomputes F1 as the harmonic mean of the printed P and R, exactly, and
//! flags rows whose printed F1 is further than the tolerance away.

use std::fmt;

use crate::corpus::DocumentKind;
use crate::experiment::Validation;
use crate::prompt::ContextMode;
use crate::scoring::{f1, Percent};
use crate::ExactMetric;

const REFERENCE_TSV: &str = include_str!("../assets/reference_results.tsv");

/// Allowed distance between printed and recomputed F1, in hundredths of a
/// percentage point.
pub const F1_TOLERANCE: Percent = Percent(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceRow {
    pub table: u8,
    pub dataset: DocumentKind,
    pub validation: Validation,
    pub model: String,
    pub context: ContextMode,
    pub shots: u8,
    pub precision: Percent,
    pub recall: Percent,
    pub f1: Percent,
}

impl fmt::Display for ReferenceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "table {} {} {} {} shots={} (P={}, R={}, F1={})",
            self.table, self.validation, self.model, self.context, self.shots, self.precision, self.recall, self.f1
        )
    }
}

pub fn parse_reference(text: &str) -> Result<Vec<ReferenceRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |what: &str| format!("line {}: {what}", i + 1);
        if f.len() != 9 {
            return Err(err(&format!("expected 9 fields, found {}", f.len())));
        }
        rows.push(ReferenceRow {
            table: f[0].parse().map_err(|_| err("bad table number"))?,
            dataset: f[1].parse().map_err(|e: String| err(&e))?,
            validation: f[2].parse().map_err(|e: String| err(&e))?,
            model: f[3].to_owned(),
            context: f[4].parse().map_err(|e: String| err(&e))?,
            shots: f[5].parse().map_err(|_| err("bad shot count"))?,
            precision: f[6].parse().map_err(|e: String| err(&e))?,
            recall: f[7].parse().map_err(|e: String| err(&e))?,
            f1: f[8].parse().map_err(|e: String| err(&e))?,
        });
    }
    Ok(rows)
}

/// All transcribed rows: both validation columns of the abstract table and
/// the trial table.
pub fn reference_rows() -> Vec<ReferenceRow> {
    parse_reference(REFERENCE_TSV).expect("bundled reference table parses")
}

/// The 40 automated-validation triples, one per model, context and shot
/// count in each of the two tables.
pub fn automated_rows() -> Vec<ReferenceRow> {
    reference_rows()
        .into_iter()
        .filter(|r| r.validation == Validation::Auto)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct F1Check {
    pub row: ReferenceRow,
    /// Harmonic mean of the printed P and R, exact, as a fraction.
    pub recomputed: Option<ExactMetric>,
    pub consistent: bool,
}

impl F1Check {
    pub fn recomputed_percent(&self) -> Option<Percent> {
        self.recomputed.map(Percent::from_fraction)
    }
}

/// Recompute F1 from printed P and R and compare with the printed F1.
pub fn check_triple(precision: Percent, recall: Percent, printed_f1: Percent, tolerance: Percent) -> Option<(ExactMetric, bool)> {
    let exact = f1(precision.as_fraction(), recall.as_fraction()).ok()?;
    let diff = exact - printed_f1.as_fraction();
    let diff = if diff < ExactMetric::from_integer(0) { -diff } else { diff };
    Some((exact, diff <= tolerance.as_fraction()))
}

pub fn check_rows(rows: &[ReferenceRow], tolerance: Percent) -> Vec<F1Check> {
    rows.iter()
        .map(|row| {
            let res = check_triple(row.precision, row.recall, row.f1, tolerance);
            F1Check {
                row: row.clone(),
                recomputed: res.map(|(x, _)| x),
                consistent: res.is_some_and(|(_, ok)| ok),
            }
        })
        .collect()
}

pub fn flagged(checks: &[F1Check]) -> Vec<&F1Check> {
    checks.iter().filter(|c| !c.consistent).collect()
}
