mod common;

#[test]
fn report_files_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let bad = common::golden_mismatches(dir.path());
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}
