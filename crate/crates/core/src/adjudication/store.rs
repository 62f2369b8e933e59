use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdjudicationCase, AdjudicationError, CaseBook, Verdict};

pub const CASES_FILE: &str = "cases.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";

/// One accepted verdict as written to the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub case_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub tie_break: bool,
}

/// Case seeds plus an append-only verdict log in one directory.
///
/// The in-memory state is always the seeds with every logged event replayed,
/// and an event is synced to disk before it is applied.
#[derive(Debug)]
pub struct AdjudicationStore {
    dir: PathBuf,
    book: CaseBook,
    log: File,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AdjudicationError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| AdjudicationError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn write_seeds(path: &Path, cases: &[AdjudicationCase]) -> Result<(), AdjudicationError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = File::create(&tmp)?;
        for case in cases {
            let mut seed = case.clone();
            seed.verdicts.clear();
            seed.status = super::CaseStatus::Pending;
            seed.final_decision = None;
            serde_json::to_writer(&mut f, &seed).map_err(|e| AdjudicationError::Corrupt(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

impl AdjudicationStore {
    /// Open the store at `dir`, replaying its log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, AdjudicationError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let seeds: Vec<AdjudicationCase> = read_jsonl(&dir.join(CASES_FILE))?;
        let mut book = CaseBook::new(seeds)?;
        let events: Vec<VerdictEvent> = read_jsonl(&dir.join(EVENTS_FILE))?;
        for (i, ev) in events.into_iter().enumerate() {
            book.submit_verdict(&ev.case_id, ev.verdict, ev.tie_break)
                .map_err(|e| AdjudicationError::Corrupt(format!("event {}: {e}", i + 1)))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_FILE))?;
        Ok(Self { dir, book, log })
    }

    /// Open the store and add any cases it does not hold yet. Existing cases
    /// and their verdicts are left alone. Returns the number added.
    pub fn open_with_cases(
        dir: impl AsRef<Path>,
        cases: Vec<AdjudicationCase>,
    ) -> Result<(Self, usize), AdjudicationError> {
        let mut store = Self::open(dir)?;
        let mut added = 0;
        for case in cases {
            if store.book.get(&case.case_id).is_none() {
                store.book.insert(case)?;
                added += 1;
            }
        }
        if added > 0 {
            let all: Vec<AdjudicationCase> = store.book.cases().cloned().collect();
            write_seeds(&store.dir.join(CASES_FILE), &all)?;
        }
        Ok((store, added))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn book(&self) -> &CaseBook {
        &self.book
    }

    pub fn submit(&mut self, case_id: &str, verdict: Verdict, tie_break: bool) -> Result<AdjudicationCase, AdjudicationError> {
        let updated = self.book.preview(case_id, verdict.clone(), tie_break)?;
        let event = VerdictEvent { case_id: case_id.to_owned(), verdict, tie_break };
        let mut line = serde_json::to_vec(&event).map_err(|e| AdjudicationError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.book.commit(updated.clone());
        Ok(updated)
    }
}
