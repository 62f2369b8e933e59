use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use adjuvant_core::adjudication::{parse_export, AdjudicationStore, ReviewService};
use adjuvant_core::corpus::{self, DocumentKind, DocumentRecord, GoldSet, LoadOptions, SynonymDictionary};
use adjuvant_core::experiment::{
    self, collect_cases, load_results, report, rows_from_tsv, rows_to_tsv, score_cell, ExperimentConfig,
    ExperimentError, ReportOptions, Validation, METRICS_FILE,
};
use adjuvant_core::gateway::{read_records, BackendKind, Gateway, HttpBackend, MockBackend, ReplayBackend, ReplayStore};
use adjuvant_core::postprocess::{canonical_table, parse_response, ParseOptions};
use adjuvant_core::reference::reference_rows;
use adjuvant_core::scoring::FinalDecision;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adjuvant", version, about = "Extract and score vaccine adjuvant names with prompted LLMs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// abstract or trial
    #[arg(long, global = true)]
    dataset_type: Option<String>,
    /// Model name, or a comma-separated list
    #[arg(long, global = true)]
    model: Option<String>,
    /// Shot counts, e.g. `3`, `0-4` or `0,2,4`
    #[arg(long, global = true)]
    shots: Option<String>,
    /// with, without or both
    #[arg(long, global = true)]
    context: Option<String>,
    #[arg(long, global = true)]
    runs: Option<u32>,
    /// live, replay or mock
    #[arg(long, global = true)]
    backend: Option<String>,
    /// literal or standard
    #[arg(long, global = true)]
    mode: Option<String>,
    /// auto or manual
    #[arg(long, global = true)]
    validation: Option<String>,
    /// Experiment configuration file (key=value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and cross-check a corpus, gold set and dictionary
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long, default_value = "|")]
        context_delimiter: String,
    },
    /// Run the experiment matrix into a results directory
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        results: PathBuf,
        /// Replay store: read by the replay backend, appended to by the others
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Adjudication store to seed with the stable mismatches
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        consistency_threshold: Option<u32>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Parse a raw model response (file or stdin), or every response in a
    /// replay store, into canonical tables
    Parse {
        /// Document id the response belongs to; with --replay, keep only
        /// that document's responses
        #[arg(long, required_unless_present = "replay")]
        id: Option<String>,
        #[arg(conflicts_with = "replay")]
        file: Option<PathBuf>,
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        strict_tabs: bool,
    },
    /// Score a results directory into metrics rows
    Score {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Verdict export file, or an adjudication store directory
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Defaults to metrics.tsv inside the results directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the adjudication API
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Hide gold names and gold linkages from reviewers
        #[arg(long)]
        blind: bool,
    },
    /// Render metrics rows as a grouped table
    Report {
        /// Metrics rows file
        #[arg(long, conflicts_with_all = ["results", "fixture"])]
        rows: Option<PathBuf>,
        /// Results directory holding metrics.tsv
        #[arg(long, conflicts_with = "fixture")]
        results: Option<PathBuf>,
        /// Use the bundled published tables and check F1 against P and R
        #[arg(long)]
        fixture: bool,
        #[arg(long)]
        check_f1: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the flat row file here
        #[arg(long)]
        flat: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn config(global: &Global) -> Result<ExperimentConfig, Failure> {
    let mut c = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let runs = global.runs.map(|r| r.to_string());
    let overrides = [
        ("dataset_type", global.dataset_type.as_deref()),
        ("models", global.model.as_deref()),
        ("shots", global.shots.as_deref()),
        ("context", global.context.as_deref()),
        ("runs", runs.as_deref()),
        ("mode", global.mode.as_deref()),
        ("validation", global.validation.as_deref()),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    Ok(c)
}

fn load_corpus(path: &Path, kind: DocumentKind, delimiter: &str) -> Result<Vec<DocumentRecord>, Failure> {
    let opts = LoadOptions { context_delimiter: delimiter.to_owned() };
    corpus::load_documents(path, kind, &opts).map_err(data)
}

fn load_dictionary(path: Option<&Path>) -> Result<SynonymDictionary, Failure> {
    match path {
        Some(p) => corpus::load_dictionary(p).map_err(data),
        None => Ok(SynonymDictionary::default()),
    }
}

fn ingest(
    global: &Global,
    corpus_path: &Path,
    gold: Option<&Path>,
    dictionary: Option<&Path>,
    delimiter: &str,
) -> Result<(), Failure> {
    let kind: DocumentKind = global
        .dataset_type
        .as_deref()
        .ok_or_else(|| usage("ingest needs --dataset-type"))?
        .parse()
        .map_err(usage)?;
    let records = load_corpus(corpus_path, kind, delimiter)?;
    println!("dataset_type\t{}", kind.as_str());
    println!("records\t{}", records.len());
    println!("with_context\t{}", records.iter().filter(|r| r.context.as_ref().is_some_and(|c| !c.is_empty())).count());
    if let Some(gold) = gold {
        let gold = corpus::load_gold(gold).map_err(data)?;
        let rep = corpus::validate_corpus(&records, &gold);
        println!("gold_documents\t{}", gold.len());
        println!("gold_names\t{}", gold.total_names());
        println!("gold_missing_from_corpus\t{}", rep.missing_from_corpus.len());
        println!("unannotated_records\t{}", rep.unannotated.len());
        for id in &rep.missing_from_corpus {
            eprintln!("warning: gold id {id} has no corpus record");
        }
    }
    if dictionary.is_some() {
        let dict = load_dictionary(dictionary)?;
        println!("dictionary_entries\t{}", dict.len());
        println!("stoplist_terms\t{}", dict.stoplist().count());
    }
    Ok(())
}

/// Mock responses list the document's own context items.
fn context_echo(records: &[DocumentRecord]) -> MockBackend {
    let responses: HashMap<String, String> = records
        .iter()
        .map(|r| {
            let mut text = String::new();
            for item in r.context.iter().flatten() {
                text.push_str(&format!("{}\t{item}\n", r.id));
            }
            text.push_str("Done\n");
            (r.id.clone(), text)
        })
        .collect();
    MockBackend::scripted(responses, "Done\n")
}

fn gateway(global: &Global, c: &ExperimentConfig, replay: Option<&Path>, records: &[DocumentRecord]) -> Result<Gateway, Failure> {
    let kind: BackendKind = global.backend.as_deref().unwrap_or("live").parse().map_err(usage)?;
    let store = match replay {
        Some(p) => Some(Arc::new(ReplayStore::open(p).map_err(data)?)),
        None => None,
    };
    let gw = match kind {
        BackendKind::Replay => {
            let store = store.ok_or_else(|| usage("the replay backend needs --replay FILE"))?;
            return Ok(Gateway::new(ReplayBackend::new(store)));
        }
        BackendKind::Mock => Gateway::new(context_echo(records)),
        BackendKind::Live => Gateway::new(HttpBackend::from_env(c.params.request_timeout).map_err(data)?),
    };
    Ok(match store {
        Some(s) => gw.with_recorder(s),
        None => gw,
    })
}

#[allow(clippy::too_many_arguments)]
fn run(
    global: &Global,
    corpus_path: &Path,
    gold: &Path,
    dictionary: Option<&Path>,
    results: &Path,
    replay: Option<&Path>,
    cases: Option<&Path>,
    threshold: Option<u32>,
    concurrency: Option<usize>,
) -> Result<(), Failure> {
    let mut c = config(global)?;
    if let Some(t) = threshold {
        c.set("consistency_threshold", &t.to_string())?;
    }
    if let Some(n) = concurrency {
        c.set("concurrency", &n.to_string())?;
    }
    c.validate()?;
    let records = load_corpus(corpus_path, c.kind, "|")?;
    let gold = corpus::load_gold(gold).map_err(data)?;
    let dict = load_dictionary(dictionary)?;
    let gw = gateway(global, &c, replay, &records)?;

    let cells = experiment::run_matrix(&c, &records, &gold, &dict, &gw, results)?;
    for cell in &cells {
        println!(
            "{}\textractions={}\tfailures={}",
            cell.cell.label(),
            cell.runs.first().map_or(0, Vec::len),
            cell.failures.len()
        );
    }
    if let Some(dir) = cases {
        let new_cases = collect_cases(&cells, &records, &gold, c.consistency_threshold as usize);
        let total = new_cases.len();
        let (_, added) = AdjudicationStore::open_with_cases(dir, new_cases).map_err(data)?;
        println!("stable_mismatch_cases\t{total}\tadded\t{added}");
    }
    Ok(())
}

fn parse_replay(path: &Path, id: Option<&str>, opts: &ParseOptions) -> Result<(), Failure> {
    let records = read_records(path).map_err(data)?;
    let mut failed = 0;
    for r in records.iter().filter(|r| id.is_none_or(|id| r.target_id == id)) {
        let res = parse_response(&r.response, &r.target_id, opts);
        for w in &res.warnings {
            eprintln!("warning: {} {}: {w}", r.target_id, &r.cache_key[..12]);
        }
        match res.error {
            Some(e) => {
                eprintln!("error: {} {}: {e}", r.target_id, &r.cache_key[..12]);
                failed += 1;
            }
            None => print!("{}", canonical_table(&res.extractions)),
        }
    }
    if failed > 0 {
        return Err(Failure::Data(format!("{failed} response(s) could not be parsed")));
    }
    Ok(())
}

fn parse(
    id: Option<&str>,
    file: Option<&Path>,
    replay: Option<&Path>,
    cap: Option<usize>,
    strict_tabs: bool,
) -> Result<(), Failure> {
    let mut opts = ParseOptions { strict_tabs, ..Default::default() };
    if let Some(cap) = cap {
        opts.cap = cap;
    }
    if let Some(path) = replay {
        return parse_replay(path, id, &opts);
    }
    let id = id.ok_or_else(|| usage("parse needs --id"))?;
    let raw = match file {
        Some(p) => fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(data)?;
            s
        }
    };
    let res = parse_response(&raw, id, &opts);
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(e) = res.error {
        return Err(Failure::Data(format!("{e:?}: {e}")));
    }
    print!("{}", canonical_table(&res.extractions));
    Ok(())
}

fn load_verdicts(path: &Path) -> Result<Vec<FinalDecision>, Failure> {
    if path.is_dir() {
        let store = AdjudicationStore::open(path).map_err(data)?;
        return Ok(store.book().export_verdicts());
    }
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    parse_export(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn score(global: &Global, results: &Path, gold: &Path, verdicts: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let c = config(global)?;
    let verdicts = match (c.validation, verdicts) {
        (Validation::Manual, None) => return Err(ExperimentError::MissingVerdicts.into()),
        (_, Some(p)) => Some(load_verdicts(p)?),
        (Validation::Auto, None) => None,
    };
    let gold: GoldSet = corpus::load_gold(gold).map_err(data)?;
    let cells = load_results(results)?;
    let mut rows = Vec::new();
    for cell in &cells {
        rows.extend(score_cell(cell, &gold, None, Validation::Auto, c.mode)?);
        if c.validation == Validation::Manual {
            rows.extend(score_cell(cell, &gold, verdicts.as_deref(), Validation::Manual, c.mode)?);
        }
    }
    let text = rows_to_tsv(&rows);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| results.join(METRICS_FILE));
    fs::write(&out, &text).map_err(|e| data(format!("{}: {e}", out.display())))?;
    print!("{text}");
    Ok(())
}

fn serve(store: &Path, bind: &str, blind: bool) -> Result<(), Failure> {
    let addr: std::net::SocketAddr = bind.parse().map_err(|e| usage(format!("--bind {bind}: {e}")))?;
    let store = AdjudicationStore::open(store).map_err(data)?;
    let cases = store.book().len();
    let service = ReviewService::new(store, blind);
    let rt = tokio::runtime::Runtime::new().map_err(data)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(data)?;
        let local = listener.local_addr().map_err(data)?;
        eprintln!("serving {cases} case(s) on http://{local}{}", if blind { " (blind)" } else { "" });
        adjuvant_core::adjudication::serve(listener, service).await.map_err(data)
    })
}

fn report_cmd(
    rows: Option<&Path>,
    results: Option<&Path>,
    fixture: bool,
    check_f1: bool,
    out: Option<&Path>,
    flat: Option<&Path>,
) -> Result<(), Failure> {
    let rows = if fixture {
        experiment::reference_metrics_rows(&reference_rows())
    } else {
        let path = match (rows, results) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(dir)) => dir.join(METRICS_FILE),
            (None, None) => return Err(usage("report needs --rows, --results or --fixture")),
        };
        let text = fs::read_to_string(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        rows_from_tsv(&text).map_err(|e| data(format!("{}: {e}", path.display())))?
    };
    let rep = report(&rows, ReportOptions { check_f1: check_f1 || fixture });
    match out {
        Some(p) => fs::write(p, &rep.table).map_err(|e| data(format!("{}: {e}", p.display())))?,
        None => print!("{}", rep.table),
    }
    if let Some(p) = flat {
        fs::write(p, &rep.flat).map_err(|e| data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Ingest { corpus, gold, dictionary, context_delimiter } => {
            ingest(g, corpus, gold.as_deref(), dictionary.as_deref(), context_delimiter)
        }
        Command::Run { corpus, gold, dictionary, results, replay, cases, consistency_threshold, concurrency } => run(
            g,
            corpus,
            gold,
            dictionary.as_deref(),
            results,
            replay.as_deref(),
            cases.as_deref(),
            *consistency_threshold,
            *concurrency,
        ),
        Command::Parse { id, file, replay, cap, strict_tabs } => {
            parse(id.as_deref(), file.as_deref(), replay.as_deref(), *cap, *strict_tabs)
        }
        Command::Score { results, gold, verdicts, out } => {
            score(g, results, gold, verdicts.as_deref(), out.as_deref())
        }
        Command::Serve { store, bind, blind } => serve(store, bind, *blind),
        Command::Report { rows, results, fixture, check_f1, out, flat } => {
            report_cmd(rows.as_deref(), results.as_deref(), *fixture, *check_f1, out.as_deref(), flat.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
