mod common;

use adjuvant_core::postprocess::{
    canonical_table, extract_table, parse_response, ParseError, ParseOptions, ParseWarning,
};
use common::{TABLE2_ABSTRACT_LLAMA, TABLE2_GPT_NCT, TABLE2_GPT_PMID, TABLE2_TRIAL_LLAMA};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

fn names(raw: &str, id: &str) -> (Vec<String>, adjuvant_core::ParseResult) {
    let r = parse_response(raw, id, &ParseOptions::default());
    (r.extractions.iter().map(|e| e.name.clone()).collect(), r)
}

#[test]
fn table2_advax_with_trailing_content() {
    let (n, r) = names(TABLE2_ABSTRACT_LLAMA, "PMID_26407920");
    assert_eq!(n, ["Advax"]);
    assert!(r.done_seen);
    assert!(r.warnings.contains(&ParseWarning::TrailingContentAfterDone));
    assert!(r.error.is_none());
}

#[test]
fn table2_gla_se_and_squalene() {
    let (n, r) = names(TABLE2_GPT_PMID, "PMID_25367751");
    assert_eq!(n, ["GLA-SE", "Squalene oil-in-water emulsion (SE)"]);
    assert!(r.done_seen);
    assert!(r.error.is_none());
}

#[test]
fn table2_poly_ic_lc_and_hiltonol() {
    let (n, r) = names(TABLE2_GPT_NCT, "NCT00694551");
    assert_eq!(n, ["Poly IC-LC", "Hiltonol"]);
    assert!(r.done_seen);
    assert!(r.error.is_none());
}

#[test]
fn table2_trial_rows_are_recovered_but_the_printed_output_lacks_done() {
    let scan = extract_table(TABLE2_TRIAL_LLAMA);
    let rows: Vec<&str> = scan.rows.iter().map(|(_, n)| n.as_str()).collect();
    assert_eq!(rows, ["GM-CSF", "Incomplete Freund's adjuvant", "CpG 7909"]);
    assert!(!scan.done_seen);
    let r = parse_response(TABLE2_TRIAL_LLAMA, "NCT00471471", &ParseOptions::default());
    assert_eq!(r.error, Some(ParseError::MissingDoneMarker));
}

#[test]
fn table2_trial_output_with_done_yields_three_names() {
    let raw = format!("{TABLE2_TRIAL_LLAMA} Done");
    let (n, r) = names(&raw, "NCT00471471");
    assert_eq!(n, ["GM-CSF", "Incomplete Freund's adjuvant", "CpG 7909"]);
    assert!(r.done_seen);
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
}

#[test]
fn cap_of_two_truncates_the_trial_output() {
    let raw = format!("{TABLE2_TRIAL_LLAMA} Done");
    let r = parse_response(&raw, "NCT00471471", &ParseOptions { cap: 2, ..Default::default() });
    assert_eq!(r.extractions.len(), 2);
    assert!(r.warnings.contains(&ParseWarning::OverCapTruncated));
}

#[test]
fn bare_done_is_an_empty_table() {
    let s = extract_table("Done");
    assert!(s.rows.is_empty());
    assert!(s.done_seen);
}

#[test]
fn strict_tabs_keeps_space_runs_in_names() {
    let raw = "D1\tMontanide  ISA 51\nD1  Alum\nDone";
    let strict = parse_response(raw, "D1", &ParseOptions { strict_tabs: true, ..Default::default() });
    let n: Vec<&str> = strict.extractions.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(n, ["Montanide  ISA 51"]);
}

fn fold(s: &str) -> String {
    common::fold(s)
}

fn name_strategy() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "Alum", "alum", "ALUM", "MF59", "CpG 7909", "cpg 7909", "GM-CSF", "Poly IC-LC", "QS-21", "AS01B",
        "Incomplete Freund's adjuvant", "Squalene oil-in-water emulsion (SE)",
    ])
    .prop_map(str::to_owned)
}

fn response_strategy() -> impl Strategy<Value = String> {
    let row = (prop::sample::select(vec!["D1", "D2"]), name_strategy(), prop::sample::select(vec!["\t", "  ", "\t\t"]));
    (
        prop::collection::vec(row, 0..8),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec!["", "\n", "\nextra words", " trailing"]),
    )
        .prop_map(|(rows, header, done, tail)| {
            let mut s = String::new();
            if header {
                s.push_str("PMID\tAdjuvant Name\n");
            }
            for (id, name, sep) in rows {
                s.push_str(&format!("{id}{sep}{name}\n"));
            }
            if done {
                s.push_str("Done");
                s.push_str(tail);
            }
            s
        })
}

proptest! {
    #[test]
    fn parse_is_idempotent_through_canonical_form(raw in response_strategy(), cap in 1usize..5) {
        let opts = ParseOptions { cap, ..Default::default() };
        let first = parse_response(&raw, "D1", &opts);
        prop_assume!(first.error.is_none());
        let again = parse_response(&canonical_table(&first.extractions), "D1", &opts);
        prop_assert!(again.error.is_none());
        prop_assert_eq!(again.extractions, first.extractions);
    }

    #[test]
    fn no_duplicates_and_cap_holds(raw in response_strategy(), cap in 1usize..5) {
        let r = parse_response(&raw, "D1", &ParseOptions { cap, ..Default::default() });
        let keys: BTreeSet<(String, String)> =
            r.extractions.iter().map(|e| (e.doc_id.clone(), fold(&e.name))).collect();
        prop_assert_eq!(keys.len(), r.extractions.len());
        let mut per_doc: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &r.extractions {
            *per_doc.entry(e.doc_id.as_str()).or_default() += 1;
        }
        prop_assert!(per_doc.values().all(|n| *n <= cap));
        prop_assert!(r.extractions.iter().all(|e| e.doc_id == "D1"));
    }

    #[test]
    fn arbitrary_text_gives_extractions_or_an_error_never_both(raw in any::<String>(), cap in 1usize..5) {
        let r = parse_response(&raw, "D1", &ParseOptions { cap, ..Default::default() });
        prop_assert!(!(r.error.is_some() && !r.extractions.is_empty()));
        prop_assert_eq!(r.error.is_none(), r.done_seen);
    }

    #[test]
    fn noisy_text_terminates(raw in "[A-Za-z0-9_ \t\n.#:-]{0,400}") {
        let r = parse_response(&raw, "D1", &ParseOptions::default());
        prop_assert!(!(r.error.is_some() && !r.extractions.is_empty()));
    }
}
