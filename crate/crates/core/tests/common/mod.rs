#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use adjuvant_core::adjudication::{AdjudicationStore, Decision, Verdict};
use adjuvant_core::corpus::{DocumentKind, DocumentRecord, GoldSet, SynonymDictionary};
use adjuvant_core::experiment::{
    collect_cases, report, run_matrix, score_cell, ExperimentConfig, ReportOptions, Validation,
};
use adjuvant_core::gateway::{Gateway, MockBackend};
use adjuvant_core::postprocess::Extraction;
use adjuvant_core::scoring::MetricMode;
use adjuvant_core::ExactMetric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The four raw outputs of the published sample-output table, verbatim.
pub const TABLE2_ABSTRACT_LLAMA: &str =
    "PMID PMID_26407920 Adjuvant Name PMID_26407920 Advax Done Delta inulin";
pub const TABLE2_TRIAL_LLAMA: &str = "NCT Number Adjuvant Name NCT00471471 GM-CSF NCT00471471 Incomplete Freund's adjuvant NCT00471471 CpG 7909";
pub const TABLE2_GPT_PMID: &str = "### Output: ... PMID Adjuvant Name PMID_25367751 GLA-SE\n\n\t\tPMID_25367751 Squalene oil-in-water emulsion (SE) Done ...";
pub const TABLE2_GPT_NCT: &str =
    "### Output: ... NCT Number Adjuvant Name NCT00694551 Poly IC-LC NCT00694551 Hiltonol Done ...";

pub fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Case fold and whitespace collapse, written without the library.
pub fn fold(s: &str) -> String {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.join(" ")
}

const VOCAB: [&str; 8] = ["Alum", "MF59", "AS04", "CpG 7909", "GM-CSF", "Poly IC-LC", "Montanide ISA-51", "QS-21"];
const SYNONYMS: [(&str, &str); 5] = [
    ("aluminium hydroxide", "Alum"),
    ("Hiltonol", "Poly IC-LC"),
    ("sargramostim", "GM-CSF"),
    ("CpG7909", "CpG 7909"),
    ("ISA 51", "Montanide ISA-51"),
];
const STOP: [&str; 3] = ["adjuvant", "vaccine adjuvant", "immunostimulant"];
const JUNK: [&str; 4] = ["Squalene", "Delta inulin", "Saponin", "IL-12"];

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub docs: Vec<String>,
    pub gold: Vec<(String, String)>,
    pub synonyms: Vec<(String, String)>,
    pub stop: Vec<String>,
    pub extractions: Vec<(String, String)>,
}

fn vary<R: Rng>(rng: &mut R, s: &str) -> String {
    match rng.random_range(0..4) {
        0 => s.to_owned(),
        1 => s.to_uppercase(),
        2 => s.to_lowercase(),
        _ => format!("  {}  ", s.replace(' ', "   ")),
    }
}

pub fn random_toy<R: Rng>(rng: &mut R) -> ToyCorpus {
    let n_docs = rng.random_range(1..=5);
    let docs: Vec<String> = (0..n_docs).map(|i| format!("D{i}")).collect();
    let mut gold = Vec::new();
    for d in &docs {
        for _ in 0..rng.random_range(0..=4) {
            let g = VOCAB[rng.random_range(0..VOCAB.len())];
            gold.push((d.clone(), vary(rng, g).trim().to_owned()));
        }
    }
    let synonyms = SYNONYMS
        .iter()
        .filter(|_| rng.random_bool(0.6))
        .map(|(s, c)| (s.to_string(), c.to_string()))
        .collect();
    let stop = STOP.iter().filter(|_| rng.random_bool(0.7)).map(|s| s.to_string()).collect();
    let mut extractions = Vec::new();
    for _ in 0..rng.random_range(0..=6) {
        let doc = if rng.random_bool(0.9) {
            docs[rng.random_range(0..docs.len())].clone()
        } else {
            "D9".to_owned()
        };
        let name = match rng.random_range(0..4) {
            0 => VOCAB[rng.random_range(0..VOCAB.len())],
            1 => SYNONYMS[rng.random_range(0..SYNONYMS.len())].0,
            2 => STOP[rng.random_range(0..STOP.len())],
            _ => JUNK[rng.random_range(0..JUNK.len())],
        };
        extractions.push((doc, vary(rng, name)));
    }
    ToyCorpus { docs, gold, synonyms, stop, extractions }
}

impl ToyCorpus {
    pub fn gold_set(&self) -> GoldSet {
        let mut g = GoldSet::default();
        for (d, n) in &self.gold {
            g.insert(d, n);
        }
        g
    }

    pub fn dictionary(&self) -> SynonymDictionary {
        let mut dict = SynonymDictionary::with_stoplist(self.stop.iter().map(String::as_str));
        for (s, c) in &self.synonyms {
            dict.insert_mapping(s, c).unwrap();
        }
        dict
    }

    pub fn extraction_list(&self) -> Vec<Extraction> {
        self.extractions.iter().map(|(d, n)| Extraction::new(d.as_str(), n.as_str(), 0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleCounts {
    pub total: u64,
    pub tp: u64,
    pub ns: u64,
    pub mm: u64,
    pub missed: u64,
}

/// Classify every extraction by comparing it with every stop word, gold
/// name and synonym, then count uncovered gold pairs.
pub fn oracle_counts(toy: &ToyCorpus) -> OracleCounts {
    let mut c = OracleCounts::default();
    let mut covered: BTreeSet<(String, String)> = BTreeSet::new();
    for (doc, name) in &toy.extractions {
        c.total += 1;
        let f = fold(name);
        if toy.stop.iter().any(|s| fold(s) == f) {
            c.ns += 1;
            continue;
        }
        let direct = toy.gold.iter().find(|(d, g)| d == doc && fold(g) == f);
        let via_dict = toy.synonyms.iter().find_map(|(s, canon)| {
            if fold(s) != f {
                return None;
            }
            toy.gold.iter().find(|(d, g)| d == doc && fold(g) == fold(canon))
        });
        match direct.or(via_dict) {
            Some((d, g)) => {
                c.tp += 1;
                covered.insert((d.clone(), fold(g)));
            }
            None => c.mm += 1,
        }
    }
    let pairs: BTreeSet<(String, String)> = toy.gold.iter().map(|(d, g)| (d.clone(), fold(g))).collect();
    c.missed = pairs.difference(&covered).count() as u64;
    c
}

fn q(n: u64, d: u64) -> ExactMetric {
    ExactMetric::new(n as i64, d as i64)
}

/// Expected `(P, R, F1)` computed from oracle counts.
pub fn oracle_scores(
    c: OracleCounts,
    mode: MetricMode,
) -> (Option<ExactMetric>, Option<ExactMetric>, Option<ExactMetric>) {
    let (p, r) = match mode {
        MetricMode::Literal => (
            (c.tp > 0 && c.ns <= c.tp).then(|| q(c.tp - c.ns, c.tp)),
            (c.total + c.missed > 0).then(|| q(c.tp, c.total + c.missed)),
        ),
        MetricMode::Standard => (
            (c.total > 0).then(|| q(c.tp, c.total)),
            (c.tp + c.missed > 0).then(|| q(c.tp, c.tp + c.missed)),
        ),
    };
    let f = match (p, r) {
        (Some(p), Some(r)) if p + r != ExactMetric::from_integer(0) => {
            Some(ExactMetric::from_integer(2) * p * r / (p + r))
        }
        _ => None,
    };
    (p, r, f)
}

/// Twenty-ish synthetic trials with gold names, interventions and a small
/// dictionary.
pub fn synthetic_trials(n: usize) -> (Vec<DocumentRecord>, GoldSet, SynonymDictionary) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut records = Vec::new();
    let mut gold = GoldSet::default();
    for i in 0..n {
        let id = format!("NCT{:08}", 1000 + i);
        let k = rng.random_range(1..=3);
        let names: Vec<&str> = (0..k).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
        for name in &names {
            gold.insert(&id, name);
        }
        let mut interventions: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        interventions.push(format!("peptide vaccine {i}"));
        records.push(DocumentRecord {
            id: id.clone(),
            kind: DocumentKind::Trial,
            title: format!("Phase I study {i} of a peptide vaccine with {}", names[0]),
            body: format!(
                "Patients receive peptides emulsified with {} and are followed for immune response. {}",
                names.join(" plus "),
                JUNK[i % JUNK.len()]
            ),
            context: Some(interventions),
        });
    }
    let mut dict = SynonymDictionary::default();
    for (s, c) in SYNONYMS {
        dict.insert_mapping(s, c).unwrap();
    }
    (records, gold, dict)
}

/// Mock model whose answers vary with the call count for each prompt, so
/// repeated runs disagree a little.
pub fn noisy_backend(records: &[DocumentRecord], gold: &GoldSet) -> MockBackend {
    let by_id: HashMap<String, Vec<String>> = records
        .iter()
        .map(|r| (r.id.clone(), gold.names(&r.id).to_vec()))
        .collect();
    let calls: Mutex<HashMap<u64, u64>> = Mutex::new(HashMap::new());
    MockBackend::new(move |bundle| {
        let prompt = fnv(&bundle.text);
        let n = {
            let mut calls = calls.lock().unwrap();
            let e = calls.entry(prompt).or_default();
            *e += 1;
            *e - 1
        };
        let id = &bundle.target_id;
        let names = by_id.get(id).cloned().unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(prompt ^ n.wrapping_mul(0x9e37_79b9));
        let mut rows: Vec<String> = Vec::new();
        for g in &names {
            if rng.random_bool(0.7) {
                let synonym = SYNONYMS.iter().find(|(_, c)| c == g).map(|(s, _)| *s);
                rows.push(match synonym {
                    Some(s) if rng.random_bool(0.3) => s.to_owned(),
                    _ => vary(&mut rng, g).trim().to_owned(),
                });
            }
        }
        if rng.random_bool(0.2) {
            rows.push("adjuvant".into());
        }
        let junk = JUNK[(fnv(id) % JUNK.len() as u64) as usize];
        if rng.random_bool(0.6) {
            rows.push(junk.into());
        }
        if rng.random_bool(0.15) {
            rows.push(JUNK[rng.random_range(0..JUNK.len())].into());
        }
        let mut out = String::new();
        match rng.random_range(0..4) {
            0 => {
                out.push_str("### Output:\nNCT Number\tAdjuvant Name\n");
                for r in &rows {
                    out.push_str(&format!("{id}\t{r}\n"));
                }
                out.push_str("Done\n");
            }
            1 => {
                for r in &rows {
                    out.push_str(&format!("{id}  {r}\n"));
                }
                out.push_str("Done\nThese are all the adjuvants.");
            }
            2 => {
                out.push_str("NCT Number Adjuvant Name");
                for r in &rows {
                    out.push_str(&format!(" {id} {r}"));
                }
                out.push_str(" Done");
            }
            _ => {
                for r in &rows {
                    out.push_str(&format!("{id}\t{r}\n"));
                }
                if rng.random_bool(0.8) {
                    out.push_str("done\n");
                }
            }
        }
        Ok(out)
    })
}

pub fn pipeline_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.set("models", "gpt-4o, llama-3.2-3b-instruct").unwrap();
    c.set("dataset_type", "trial").unwrap();
    c.set("shots", "0-2").unwrap();
    c.set("context", "both").unwrap();
    c.set("runs", "3").unwrap();
    c.validate().unwrap();
    c
}

#[derive(Debug, PartialEq, Eq)]
pub struct PipelineOutput {
    pub report: String,
    pub flat: String,
    pub files: BTreeMap<String, Vec<u8>>,
    pub cases: usize,
}

fn snapshot(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            snapshot(root, &p, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
        }
    }
}

/// Matrix run, stable-mismatch review with scripted reviewers, scoring in
/// both validation modes and the final report.
pub fn run_pipeline(
    records: &[DocumentRecord],
    gold: &GoldSet,
    dict: &SynonymDictionary,
    gateway: &Gateway,
    work: &Path,
) -> PipelineOutput {
    let config = pipeline_config();
    let results_dir = work.join("results");
    let cells = run_matrix(&config, records, gold, dict, gateway, &results_dir).unwrap();

    let cases = collect_cases(&cells, records, gold, config.consistency_threshold as usize);
    let (mut store, _) = AdjudicationStore::open_with_cases(work.join("cases"), cases.clone()).unwrap();
    for case in &cases {
        let h = fnv(&case.case_id);
        let first = if h.is_multiple_of(2) { Decision::ValidAdjuvant } else { Decision::Invalid };
        let second = if h.is_multiple_of(3) {
            match first {
                Decision::ValidAdjuvant => Decision::Invalid,
                Decision::Invalid => Decision::ValidAdjuvant,
            }
        } else {
            first
        };
        let verdict = |who: &str, d: Decision| Verdict {
            reviewer_id: who.into(),
            decision: d,
            gold_linkage: None,
            reason: "checked against the source text".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
        };
        store.submit(&case.case_id, verdict("r1", first), false).unwrap();
        store.submit(&case.case_id, verdict("r2", second), false).unwrap();
        if first != second {
            store.submit(&case.case_id, verdict("r3", Decision::ValidAdjuvant), true).unwrap();
        }
    }
    let verdicts = store.book().export_verdicts();

    let mut rows = Vec::new();
    for cell in &cells {
        rows.extend(score_cell(cell, gold, None, Validation::Auto, config.mode).unwrap());
        rows.extend(score_cell(cell, gold, Some(&verdicts), Validation::Manual, config.mode).unwrap());
    }
    let rep = report(&rows, ReportOptions { check_f1: true });
    let mut files = BTreeMap::new();
    snapshot(work, &results_dir, &mut files);
    PipelineOutput { report: rep.table, flat: rep.flat, files, cases: cases.len() }
}
