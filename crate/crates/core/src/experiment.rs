//! The evaluation matrix: model × context × shots, repeated over runs.
//!
//! A results directory holds one sub-directory per cell:
//!
//! ```text
//! <results>/<model>__<kind>__<context>__<shots>/
//!     cell.tsv      key/value description of the cell
//!     run-<k>.tsv   one outcome per extraction of run k
//!     log.tsv       one line per (run, document): ok or the failure
//! ```
//!
//! Nothing in the directory depends on wall-clock time, so two executions
//! against the same replay store produce identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::adjudication::{create_cases, AdjudicationCase};
use crate::corpus::{CorpusError, DocumentKind, DocumentRecord, GoldSet, SynonymDictionary};
use crate::gateway::{Gateway, GatewayError, ModelParams};
use crate::postprocess::{parse_response, Extraction, ParseOptions, DEFAULT_CAP};
use crate::prompt::{build_pool, render_prompt, select_examples, ContextMode, PromptBundle, PromptConfig, MAX_SHOTS};
use crate::reference::{check_triple, ReferenceRow, F1_TOLERANCE};
use crate::scoring::{
    apply_verdicts, f1, normalize, scores, tally, FinalDecision, MatchClass, MatchOutcome, MetricCounts, MetricMode,
    Percent, VerdictError,
};
use crate::ExactMetric;

pub const CELL_FILE: &str = "cell.tsv";
pub const LOG_FILE: &str = "log.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
const RUN_HEADER: &str = "doc_id\tname\tclass\tmatched_gold\tcanonical";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
    #[error("MissingVerdicts: manual validation needs a verdict export")]
    MissingVerdicts,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Validation {
    #[default]
    Auto,
    Manual,
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Validation::Auto => "auto",
            Validation::Manual => "manual",
        })
    }
}

impl FromStr for Validation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" | "automated" => Ok(Validation::Auto),
            "manual" => Ok(Validation::Manual),
            other => Err(format!("unknown validation {other:?} (expected auto or manual)")),
        }
    }
}

fn context_rank(c: ContextMode) -> u8 {
    match c {
        ContextMode::Without => 0,
        ContextMode::With => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Base parameters; the model name is replaced per cell.
    pub params: ModelParams,
    pub models: Vec<String>,
    pub kind: DocumentKind,
    pub contexts: Vec<ContextMode>,
    pub shots: Vec<u8>,
    pub runs: u32,
    pub cap: usize,
    pub mode: MetricMode,
    pub validation: Validation,
    pub consistency_threshold: u32,
    pub concurrency: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let params = ModelParams::default();
        Self {
            models: vec![params.model_name.clone()],
            params,
            kind: DocumentKind::Trial,
            contexts: vec![ContextMode::Without, ContextMode::With],
            shots: (0..=MAX_SHOTS).collect(),
            runs: 2,
            cap: DEFAULT_CAP,
            mode: MetricMode::Literal,
            validation: Validation::Auto,
            consistency_threshold: 2,
            concurrency: 4,
        }
    }
}

fn parse_list<T: FromStr>(value: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| format!("{what}: {e}")))
        .collect()
}

fn parse_shots(value: &str) -> Result<Vec<u8>, String> {
    let mut out = BTreeSet::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || format!("shots: malformed {part:?}");
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u8, u8) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    Ok(out.into_iter().collect())
}

impl ExperimentConfig {
    /// Set one `key=value` setting. Keys match the configuration file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let cfg = |m: String| ExperimentError::Config(m);
        let num = |what: &str| cfg(format!("{what}: expected a number, found {value:?}"));
        let value = value.trim();
        match key.trim() {
            "model" | "models" => {
                self.models = parse_list::<String>(value, "model").map_err(cfg)?;
                if let Some(first) = self.models.first() {
                    self.params.model_name = first.clone();
                }
            }
            "temperature" => self.params.temperature = value.parse().map_err(|_| num("temperature"))?,
            "max_tokens" => self.params.max_tokens = value.parse().map_err(|_| num("max_tokens"))?,
            "timeout_secs" => {
                self.params.request_timeout = Duration::from_secs(value.parse().map_err(|_| num("timeout_secs"))?)
            }
            "max_retries" => self.params.max_retries = value.parse().map_err(|_| num("max_retries"))?,
            "dataset_type" => self.kind = value.parse().map_err(cfg)?,
            "context" => {
                self.contexts = if value.eq_ignore_ascii_case("both") {
                    vec![ContextMode::Without, ContextMode::With]
                } else {
                    parse_list(value, "context").map_err(cfg)?
                }
            }
            "shots" => self.shots = parse_shots(value).map_err(cfg)?,
            "runs" => self.runs = value.parse().map_err(|_| num("runs"))?,
            "cap" => self.cap = value.parse().map_err(|_| num("cap"))?,
            "mode" => self.mode = value.parse().map_err(cfg)?,
            "validation" => self.validation = value.parse().map_err(cfg)?,
            "consistency_threshold" => {
                self.consistency_threshold = value.parse().map_err(|_| num("consistency_threshold"))?
            }
            "concurrency" => self.concurrency = value.parse().map_err(|_| num("concurrency"))?,
            other => return Err(cfg(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key=value", i + 1)))?;
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: &str| Err(ExperimentError::Config(m.to_owned()));
        self.params.validate()?;
        if self.models.is_empty() || self.models.iter().any(|m| m.trim().is_empty()) {
            return fail("at least one non-empty model name is required");
        }
        if self.contexts.is_empty() {
            return fail("at least one context mode is required");
        }
        if self.shots.is_empty() || self.shots.iter().any(|&s| s > MAX_SHOTS) {
            return fail("shots must be a non-empty subset of 0..=4");
        }
        if self.runs == 0 {
            return fail("runs must be at least 1");
        }
        if self.consistency_threshold == 0 || self.consistency_threshold > self.runs {
            return fail("consistency_threshold must lie in 1..=runs");
        }
        if self.cap == 0 {
            return fail("cap must be at least 1");
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1");
        }
        Ok(())
    }

    /// Grid cells ordered by model, context (without first) and shots.
    pub fn cells(&self) -> Vec<Cell> {
        let mut contexts = self.contexts.clone();
        contexts.sort_by_key(|c| context_rank(*c));
        contexts.dedup();
        let mut shots = self.shots.clone();
        shots.sort_unstable();
        shots.dedup();
        let mut out = Vec::new();
        for model in &self.models {
            for &context in &contexts {
                for &s in &shots {
                    out.push(Cell { model: model.clone(), kind: self.kind, context, shots: s });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub model: String,
    pub kind: DocumentKind,
    pub context: ContextMode,
    pub shots: u8,
}

impl Cell {
    /// Directory name for this cell.
    pub fn label(&self) -> String {
        let model: String = self
            .model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '-' })
            .collect();
        format!("{model}__{}__{}__{}", self.kind.as_str(), self.context, self.shots)
    }

    fn describe(&self, runs: u32, documents: usize) -> String {
        format!(
            "model\t{}\ndataset_type\t{}\ncontext\t{}\nshots\t{}\nruns\t{}\ndocuments\t{}\n",
            self.model,
            self.kind.as_str(),
            self.context,
            self.shots,
            runs,
            documents
        )
    }
}

/// Prompts for every document of one cell; a document whose prompt cannot be
/// built carries the reason instead.
pub fn cell_prompts(
    cell: &Cell,
    records: &[DocumentRecord],
    gold: &GoldSet,
) -> Vec<(String, Result<PromptBundle, String>)> {
    let pool = build_pool(records, gold);
    records
        .iter()
        .map(|rec| {
            let bundle = PromptConfig::new(cell.kind, cell.context, cell.shots)
                .and_then(|config| {
                    let examples = select_examples(&pool, cell.shots as usize, &rec.id, cell.context)?;
                    render_prompt(rec, &config, &examples)
                })
                .map_err(|e| e.to_string());
            (rec.id.clone(), bundle)
        })
        .collect()
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\r', '\n'], " ")
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn outcomes_to_tsv(outcomes: &[MatchOutcome]) -> String {
    let mut out = format!("{RUN_HEADER}\n");
    for o in outcomes {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            tsv_field(&o.extraction.doc_id),
            tsv_field(&o.extraction.name),
            o.class,
            o.matched_gold.as_deref().map(tsv_field).unwrap_or_default(),
            o.canonical.as_deref().map(tsv_field).unwrap_or_default(),
        ));
    }
    out
}

pub fn outcomes_from_tsv(text: &str, run: u32) -> Result<Vec<MatchOutcome>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(RUN_HEADER) {
        return Err("missing outcome header".into());
    }
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_owned());
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", i + 2));
            }
            Ok(MatchOutcome {
                extraction: Extraction::new(f[0], f[1], run),
                class: f[2].parse().map_err(|e: String| format!("line {}: {e}", i + 2))?,
                matched_gold: opt(f[3]),
                canonical: opt(f[4]),
                manually_validated: false,
            })
        })
        .collect()
}

/// What one cell produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResults {
    pub cell: Cell,
    pub doc_ids: Vec<String>,
    /// Outcomes per run index.
    pub runs: Vec<Vec<MatchOutcome>>,
    /// Failure lines per run: `(run, doc_id, reason)`.
    pub failures: Vec<(u32, String, String)>,
}

impl CellResults {
    pub fn mismatch_sets(&self) -> Vec<BTreeSet<(String, String)>> {
        self.runs
            .iter()
            .map(|outcomes| {
                outcomes
                    .iter()
                    .filter(|o| o.class == MatchClass::Mismatch)
                    .map(MatchOutcome::key)
                    .collect()
            })
            .collect()
    }
}

/// Execute one cell for every run and persist it under `results_dir`.
pub fn run_cell(
    cell: &Cell,
    config: &ExperimentConfig,
    records: &[DocumentRecord],
    gold: &GoldSet,
    dict: &SynonymDictionary,
    gateway: &Gateway,
    results_dir: &Path,
) -> Result<CellResults, ExperimentError> {
    let dir = results_dir.join(cell.label());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let params = ModelParams { model_name: cell.model.clone(), ..config.params.clone() };

    let prompts = cell_prompts(cell, records, gold);
    let bundles: Vec<PromptBundle> = prompts.iter().filter_map(|(_, b)| b.as_ref().ok().cloned()).collect();
    let doc_ids: Vec<String> = prompts.iter().map(|(id, _)| id.clone()).collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut log = String::from("run\tdoc_id\tstatus\tdetail\n");
    for run in 0..config.runs {
        let responses = gateway.run_batch_occurrence(&bundles, &params, config.concurrency, run as usize);
        let mut responses = responses.into_iter();
        let mut outcomes = Vec::new();
        for (doc_id, bundle) in &prompts {
            let mut fail = |reason: String| {
                log.push_str(&format!("{run}\t{}\tfailed\t{}\n", tsv_field(doc_id), tsv_field(&reason)));
                failures.push((run, doc_id.clone(), reason));
            };
            let Ok(_) = bundle else {
                fail(format!("prompt: {}", bundle.as_ref().unwrap_err()));
                continue;
            };
            let response = match responses.next().expect("one response per bundle") {
                Ok(r) => r,
                Err(e) => {
                    fail(format!("gateway: {e}"));
                    continue;
                }
            };
            let opts = ParseOptions { cap: config.cap, run, ..Default::default() };
            let parsed = parse_response(&response.text, doc_id, &opts);
            if let Some(err) = parsed.error {
                fail(format!("parse: {err}"));
                continue;
            }
            let warnings: Vec<String> = parsed.warnings.iter().map(|w| w.to_string()).collect();
            log.push_str(&format!("{run}\t{}\tok\t{}\n", tsv_field(doc_id), warnings.join(",")));
            outcomes.extend(parsed.extractions.iter().map(|e| crate::scoring::match_extraction(e, gold, dict)));
        }
        write_file(&dir.join(format!("run-{run}.tsv")), &outcomes_to_tsv(&outcomes))?;
        runs.push(outcomes);
    }
    write_file(&dir.join(LOG_FILE), &log)?;
    write_file(&dir.join(CELL_FILE), &cell.describe(config.runs, records.len()))?;

    Ok(CellResults { cell: cell.clone(), doc_ids, runs, failures })
}

/// Run every cell of the grid in order.
pub fn run_matrix(
    config: &ExperimentConfig,
    records: &[DocumentRecord],
    gold: &GoldSet,
    dict: &SynonymDictionary,
    gateway: &Gateway,
    results_dir: &Path,
) -> Result<Vec<CellResults>, ExperimentError> {
    config.validate()?;
    if let Some(r) = records.iter().find(|r| r.kind != config.kind) {
        return Err(ExperimentError::Config(format!("record {} is not of kind {}", r.id, config.kind.as_str())));
    }
    fs::create_dir_all(results_dir).map_err(io_err(results_dir))?;
    config
        .cells()
        .iter()
        .map(|cell| {
            tracing::info!(cell = %cell.label(), "running cell");
            run_cell(cell, config, records, gold, dict, gateway, results_dir)
        })
        .collect()
}

fn malformed(path: &Path, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Malformed { path: path.to_path_buf(), message: message.into() }
}

pub fn load_cell(dir: &Path) -> Result<CellResults, ExperimentError> {
    let cell_path = dir.join(CELL_FILE);
    let text = fs::read_to_string(&cell_path).map_err(io_err(&cell_path))?;
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('\t')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| malformed(&cell_path, format!("missing {k}")));
    let bad = |e: String| malformed(&cell_path, e);
    let cell = Cell {
        model: get("model")?.to_owned(),
        kind: get("dataset_type")?.parse().map_err(bad)?,
        context: get("context")?.parse().map_err(bad)?,
        shots: get("shots")?.parse().map_err(|_| malformed(&cell_path, "bad shots"))?,
    };
    let run_count: u32 = get("runs")?.parse().map_err(|_| malformed(&cell_path, "bad runs"))?;

    let mut runs = Vec::new();
    for run in 0..run_count {
        let path = dir.join(format!("run-{run}.tsv"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        runs.push(outcomes_from_tsv(&text, run).map_err(|e| malformed(&path, e))?);
    }

    let log_path = dir.join(LOG_FILE);
    let log = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
    let mut doc_ids = Vec::new();
    let mut failures = Vec::new();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(malformed(&log_path, format!("bad log line {line:?}")));
        }
        let run: u32 = f[0].parse().map_err(|_| malformed(&log_path, "bad run index"))?;
        if run == 0 {
            doc_ids.push(f[1].to_owned());
        }
        if f[2] == "failed" {
            failures.push((run, f[1].to_owned(), f[3].to_owned()));
        }
    }
    Ok(CellResults { cell, doc_ids, runs, failures })
}

/// Every cell under `results_dir`, ordered like the grid.
pub fn load_results(results_dir: &Path) -> Result<Vec<CellResults>, ExperimentError> {
    let entries = fs::read_dir(results_dir).map_err(io_err(results_dir))?;
    let mut cells = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(results_dir))?.path();
        if path.join(CELL_FILE).is_file() {
            cells.push(load_cell(&path)?);
        }
    }
    cells.sort_by(|a, b| {
        (&a.cell.model, a.cell.kind.as_str(), context_rank(a.cell.context), a.cell.shots).cmp(&(
            &b.cell.model,
            b.cell.kind.as_str(),
            context_rank(b.cell.context),
            b.cell.shots,
        ))
    });
    Ok(cells)
}

/// Pairs present in at least `threshold` of the per-run sets.
pub fn stable_mismatches(
    per_run: &[BTreeSet<(String, String)>],
    threshold: usize,
) -> BTreeSet<(String, String)> {
    let mut counts: BTreeMap<&(String, String), usize> = BTreeMap::new();
    for set in per_run {
        for key in set {
            *counts.entry(key).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, n)| *n >= threshold)
        .map(|(k, _)| k.clone())
        .collect()
}

/// Review cases for the stable mismatches of every cell. The surface form
/// comes from the earliest run that produced the pair.
pub fn collect_cases(
    results: &[CellResults],
    records: &[DocumentRecord],
    gold: &GoldSet,
    threshold: usize,
) -> Vec<AdjudicationCase> {
    let by_id: BTreeMap<&str, &DocumentRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut picked: BTreeMap<(String, String), Extraction> = BTreeMap::new();
    for cell in results {
        for key in stable_mismatches(&cell.mismatch_sets(), threshold) {
            if picked.contains_key(&key) {
                continue;
            }
            let found = cell.runs.iter().flatten().find(|o| o.class == MatchClass::Mismatch && o.key() == key);
            if let Some(o) = found {
                picked.insert(key, o.extraction.clone());
            }
        }
    }
    let input: Vec<(Extraction, &DocumentRecord, &[String])> = picked
        .into_values()
        .filter_map(|e| {
            let rec = *by_id.get(e.doc_id.as_str())?;
            let names = gold.names(&e.doc_id);
            Some((e, rec, names))
        })
        .collect();
    create_cases(&input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunTag {
    Run(u32),
    Mean,
}

impl fmt::Display for RunTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunTag::Run(k) => write!(f, "{k}"),
            RunTag::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for RunTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(RunTag::Mean),
            _ => s.parse().map(RunTag::Run).map_err(|_| format!("bad run tag {s:?}")),
        }
    }
}

/// One scored line. Percentages are rounded half-up to two decimals;
/// undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsRow {
    pub model: String,
    pub kind: DocumentKind,
    pub context: ContextMode,
    pub shots: u8,
    pub validation: Validation,
    pub mode: MetricMode,
    pub run: RunTag,
    pub precision: Option<Percent>,
    pub recall: Option<Percent>,
    pub f1: Option<Percent>,
    pub counts: Option<MetricCounts>,
}

pub const ROW_HEADER: &str = "model\tdataset_type\tcontext\tshots\tvalidation\tmode\trun\tP\tR\tF1\ttotal\ttp\tnonspecific\tmismatches\tmissed\tvalid_unlisted";

impl MetricsRow {
    /// Printed F1 agrees with the harmonic mean of printed P and R.
    pub fn f1_consistent(&self) -> bool {
        match (self.precision, self.recall, self.f1) {
            (Some(p), Some(r), Some(f)) => check_triple(p, r, f, F1_TOLERANCE).is_some_and(|(_, ok)| ok),
            (Some(p), Some(r), None) => check_triple(p, r, Percent(0), F1_TOLERANCE).is_none(),
            _ => self.f1.is_none(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let pct = |p: Option<Percent>| p.map(|p| p.to_string()).unwrap_or_default();
        let counts = match &self.counts {
            Some(c) => format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.total_identifications, c.true_positives, c.nonspecific, c.mismatches, c.missed, c.valid_unlisted
            ),
            None => "\t\t\t\t\t".to_owned(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            tsv_field(&self.model),
            self.kind.as_str(),
            self.context,
            self.shots,
            self.validation,
            self.mode,
            self.run,
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            counts
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 16 {
            return Err(format!("expected 16 fields, found {}", f.len()));
        }
        let pct = |s: &str| -> Result<Option<Percent>, String> {
            if s.is_empty() { Ok(None) } else { s.parse().map(Some) }
        };
        let counts = if f[10..].iter().all(|s| s.is_empty()) {
            None
        } else {
            let n = |s: &str| s.parse::<u64>().map_err(|_| format!("bad count {s:?}"));
            Some(MetricCounts {
                total_identifications: n(f[10])?,
                true_positives: n(f[11])?,
                nonspecific: n(f[12])?,
                mismatches: n(f[13])?,
                missed: n(f[14])?,
                valid_unlisted: n(f[15])?,
            })
        };
        Ok(Self {
            model: f[0].to_owned(),
            kind: f[1].parse()?,
            context: f[2].parse()?,
            shots: f[3].parse().map_err(|_| format!("bad shots {:?}", f[3]))?,
            validation: f[4].parse()?,
            mode: f[5].parse()?,
            run: f[6].parse()?,
            precision: pct(f[7])?,
            recall: pct(f[8])?,
            f1: pct(f[9])?,
            counts,
        })
    }
}

pub fn rows_to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{ROW_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub fn rows_from_tsv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(ROW_HEADER) {
        return Err("missing metrics header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricsRow::from_tsv(l).map_err(|e| format!("line {}: {e}", i + 2)))
        .collect()
}

/// Verdicts that bear on the mismatches among `outcomes`.
fn relevant_verdicts(outcomes: &[MatchOutcome], verdicts: &[FinalDecision]) -> Vec<FinalDecision> {
    let keys: BTreeSet<(String, String)> = outcomes
        .iter()
        .filter(|o| o.class == MatchClass::Mismatch)
        .map(MatchOutcome::key)
        .collect();
    verdicts
        .iter()
        .filter(|v| keys.contains(&(v.doc_id.clone(), normalize(&v.name))))
        .cloned()
        .collect()
}

/// Counts and percentages for one run's outcomes.
pub fn score_outcomes(
    outcomes: &[MatchOutcome],
    gold: &GoldSet,
    verdicts: Option<&[FinalDecision]>,
    mode: MetricMode,
) -> Result<(MetricCounts, [Option<Percent>; 3]), ExperimentError> {
    let adjusted;
    let outcomes = match verdicts {
        Some(v) => {
            adjusted = apply_verdicts(outcomes, &relevant_verdicts(outcomes, v))?;
            &adjusted[..]
        }
        None => outcomes,
    };
    let counts = tally(outcomes, gold);
    let s = scores::<ExactMetric>(&counts, mode);
    Ok((counts, [s.precision, s.recall, s.f1].map(|x| x.map(Percent::from_fraction))))
}

/// Mean of the defined per-run values, as a fraction.
fn mean_fraction(values: &[Option<Percent>]) -> Option<ExactMetric> {
    let defined: Vec<i64> = values.iter().flatten().map(|p| p.0).collect();
    if defined.is_empty() {
        return None;
    }
    Some(ExactMetric::new(defined.iter().sum(), defined.len() as i64 * 10_000))
}

/// Score a cell: one row per run, then a mean row whose P and R average
/// the per-run values and whose F1 is their harmonic mean.
/// Run 0 is the canonical row used by [`report`]. Manual validation requires
/// the verdict export.
pub fn score_cell(
    results: &CellResults,
    gold: &GoldSet,
    verdicts: Option<&[FinalDecision]>,
    validation: Validation,
    mode: MetricMode,
) -> Result<Vec<MetricsRow>, ExperimentError> {
    let verdicts = match validation {
        Validation::Auto => None,
        Validation::Manual => Some(verdicts.ok_or(ExperimentError::MissingVerdicts)?),
    };
    let gold = gold.restricted_to(results.doc_ids.iter().map(String::as_str));
    let cell = &results.cell;
    let row = |run, counts, [p, r, f]: [Option<Percent>; 3]| MetricsRow {
        model: cell.model.clone(),
        kind: cell.kind,
        context: cell.context,
        shots: cell.shots,
        validation,
        mode,
        run,
        precision: p,
        recall: r,
        f1: f,
        counts,
    };

    let mut rows = Vec::new();
    for (k, outcomes) in results.runs.iter().enumerate() {
        let (counts, pct) = score_outcomes(outcomes, &gold, verdicts, mode)?;
        rows.push(row(RunTag::Run(k as u32), Some(counts), pct));
    }
    let column = |i: usize| -> Vec<Option<Percent>> {
        rows.iter()
            .map(|r: &MetricsRow| [r.precision, r.recall, r.f1][i])
            .collect()
    };
    let (p, r) = (mean_fraction(&column(0)), mean_fraction(&column(1)));
    let f = match (p, r) {
        (Some(p), Some(r)) => f1(p, r).ok(),
        _ => None,
    };
    let mean = [p, r, f].map(|x| x.map(Percent::from_fraction));
    rows.push(row(RunTag::Mean, None, mean));
    Ok(rows)
}

/// Rows built from transcribed published values, for fixture reports.
pub fn reference_metrics_rows(rows: &[ReferenceRow]) -> Vec<MetricsRow> {
    rows.iter()
        .map(|r| MetricsRow {
            model: r.model.clone(),
            kind: r.dataset,
            context: r.context,
            shots: r.shots,
            validation: r.validation,
            mode: MetricMode::Literal,
            run: RunTag::Run(0),
            precision: Some(r.precision),
            recall: Some(r.recall),
            f1: Some(r.f1),
            counts: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportOptions {
    /// List rows whose F1 disagrees with their P and R in a footer.
    pub check_f1: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub table: String,
    pub flat: String,
}

pub const REPORT_HEADER: &str = "Shots\tAuto P (%)\tAuto R (%)\tAuto F1 (%)\tManual P (%)\tManual R (%)\tManual F1 (%)";

fn block_title(model: &str, kind: DocumentKind, context: ContextMode, mode: MetricMode) -> String {
    let ctx = match context {
        ContextMode::With => "With",
        ContextMode::Without => "Without",
    };
    format!("{model} {ctx} {} [{}, {mode}]", kind.context_label(), kind.as_str())
}

/// Tab-separated table grouped by model and context, shots ascending, with
/// the canonical run's P, R and F1 for each validation mode. The flat file
/// holds every row unchanged.
pub fn report(rows: &[MetricsRow], opts: ReportOptions) -> Report {
    type BlockKey<'a> = (&'a str, &'a str, u8, MetricMode);
    let mut blocks: BTreeMap<BlockKey, BTreeMap<u8, BTreeMap<Validation, &MetricsRow>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.run == RunTag::Run(0)) {
        blocks
            .entry((r.model.as_str(), r.kind.as_str(), context_rank(r.context), r.mode))
            .or_default()
            .entry(r.shots)
            .or_default()
            .insert(r.validation, r);
    }

    let pct = |p: Option<Percent>| p.map(|p| p.to_string()).unwrap_or_default();
    let mut table = format!("{REPORT_HEADER}\n");
    let mut flagged = Vec::new();
    let mut literal = false;
    for by_shots in blocks.values() {
        let first = by_shots.values().next().and_then(|m| m.values().next()).expect("blocks are non-empty");
        let title = block_title(&first.model, first.kind, first.context, first.mode);
        literal |= first.mode == MetricMode::Literal;
        table.push_str(&format!("# {title}\n"));
        for (shots, by_validation) in by_shots {
            let mut line = shots.to_string();
            for v in [Validation::Auto, Validation::Manual] {
                match by_validation.get(&v) {
                    Some(r) => {
                        line.push_str(&format!("\t{}\t{}\t{}", pct(r.precision), pct(r.recall), pct(r.f1)));
                        if opts.check_f1 && !r.f1_consistent() {
                            let recomputed = match (r.precision, r.recall) {
                                (Some(p), Some(rc)) => check_triple(p, rc, Percent(0), F1_TOLERANCE)
                                    .map(|(x, _)| Percent::from_fraction(x).to_string())
                                    .unwrap_or_else(|| "undefined".into()),
                                _ => "undefined".into(),
                            };
                            flagged.push(format!(
                                "# F1 inconsistent: {title} shots={shots} {v}: printed {}, recomputed {recomputed}",
                                pct(r.f1)
                            ));
                        }
                    }
                    None => line.push_str("\t\t\t"),
                }
            }
            table.push_str(&line);
            table.push('\n');
        }
    }
    if opts.check_f1 {
        table.push_str(&format!("# F1 check: {} inconsistent row(s)\n", flagged.len()));
        for f in &flagged {
            table.push_str(f);
            table.push('\n');
        }
    }
    if literal {
        table.push_str("# literal mode: P = (TP - nonspecific) / TP, R = TP / (identifications + missed)\n");
    }
    Report { table, flat: rows_to_tsv(rows) }
}
