use std::fs;
use std::path::PathBuf;

use branchlab::harness::{digest, run_suite, verify, ExperimentSpec, Verdict};

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("branchlab-harness-{}-{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

const SUITE: &str = "
# quick checks
[entrance-law]
replicates = 4000
seed = 11
thetas = 0.5 1, 2

[reduced-martingale]
replicates = 4000
seed = 12
";

fn run_into(dir: &PathBuf) -> Vec<(String, String)> {
    let mut specs = ExperimentSpec::parse_file(SUITE).unwrap();
    for s in &mut specs {
        s.output = Some(dir.clone());
    }
    let reports = run_suite(&specs).unwrap();
    assert_eq!(reports.len(), 2);
    reports
        .iter()
        .map(|r| {
            let csv = fs::read(dir.join(format!("{}.csv", r.experiment))).unwrap();
            let json = fs::read(dir.join(format!("{}.json", r.experiment))).unwrap();
            (digest(&csv), digest(&json))
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_outputs() {
    let (a, b) = (scratch_dir("a"), scratch_dir("b"));
    let first = run_into(&a);
    let second = run_into(&b);
    assert_eq!(first, second);
    let _ = fs::remove_dir_all(&a);
    let _ = fs::remove_dir_all(&b);
}

#[test]
fn different_seed_changes_estimates() {
    let spec = ExperimentSpec::new("entrance-law").unwrap().with_replicates(2000);
    let r1 = run_suite(&[spec.clone().with_seed(1)]).unwrap();
    let r2 = run_suite(&[spec.with_seed(2)]).unwrap();
    assert_ne!(r1[0].records[0].lhs, r2[0].records[0].lhs);
}

#[test]
fn grid_expands_to_one_row_group_per_point() {
    let specs = ExperimentSpec::parse_file(SUITE).unwrap();
    assert_eq!(specs[0].points().len(), 2);
    let reports = run_suite(&specs[..1]).unwrap();
    let hashes: std::collections::BTreeSet<_> = reports[0].records.iter().map(|r| r.params_hash.clone()).collect();
    assert_eq!(hashes.len(), 2);
    assert_eq!(reports[0].records.len(), 3);
}

#[test]
fn written_report_verifies_and_tampering_is_caught() {
    let dir = scratch_dir("verify");
    let mut spec = ExperimentSpec::new("entrance-law").unwrap().with_replicates(2000).with_seed(5);
    spec.output = Some(dir.clone());
    let report = run_suite(&[spec]).unwrap().remove(0);
    let text = fs::read_to_string(dir.join("entrance-law.json")).unwrap();
    let outcome = verify(&text).unwrap();
    assert!(outcome.ok(), "{outcome:?}");
    assert_eq!(outcome.pass + outcome.fail, report.records.len());

    let mut tampered = report.clone();
    tampered.records[0].verdict = match tampered.records[0].verdict {
        Verdict::Pass => Verdict::Fail,
        Verdict::Fail => Verdict::Pass,
    };
    let outcome = verify(&tampered.to_json().unwrap()).unwrap();
    assert!(!outcome.ok());
    assert_eq!(outcome.mismatched.len(), 1);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn unwritable_output_is_an_error() {
    let blocker = scratch_dir("blocker");
    fs::write(&blocker, b"not a directory").unwrap();
    let mut spec = ExperimentSpec::new("spectral-gap").unwrap();
    spec.output = Some(blocker.join("sub"));
    assert!(run_suite(&[spec]).is_err());
    let _ = fs::remove_file(&blocker);
}
