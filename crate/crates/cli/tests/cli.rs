use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bodyregion");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_phantom(dir: &Path, studies: usize) -> std::path::PathBuf {
    let spec = dir.join("phantom.toml");
    fs::write(
        &spec,
        format!(
            "seed = 3\nstudies = {studies}\nregions_per_study = 2\n\n\
             [[regions]]\nregion = \"Head\"\nextent_mm = 20\n\n\
             [[regions]]\nregion = \"Neck\"\nextent_mm = 20\n\n\
             [[regions]]\nregion = \"Chest\"\nextent_mm = 30\n"
        ),
    )
    .unwrap();
    let out = dir.join("phantom");
    let o = run(&["phantom", "--spec", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn sample_size_prints_worked_example() {
    let o = run(&["sample-size"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("n = 43 "), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["sample-size", "--p", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["run", "--dicom", "x", "--labels", "y", "--backend", "svm"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[evaluation]\nlevel = 1.5\n").unwrap();
    let o = run(&["filter", "--metadata", "m.ndjson", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(&cfg, "[evaluation]\nmystery = 1\n").unwrap();
    let o = run(&["filter", "--metadata", "m.ndjson", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));

    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "regions = []\n").unwrap();
    assert_eq!(run(&["phantom", "--spec", p(&spec), "--out", p(dir.path())]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ndjson");
    let o = run(&["filter", "--metadata", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("junk.dcm"), b"not dicom").unwrap();
    let o = run(&["ingest", p(&empty), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{").unwrap();
    let o = run(&["report", "--evaluation", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_is_reproducible_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let phantom = write_phantom(dir.path(), 8);
    let dicom = phantom.join("dicom");
    let labels = phantom.join("labels.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["run", "--dicom", p(&dicom), "--labels", p(&labels), "--bootstrap", "50", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["metadata.ndjson", "truth.csv", "split.csv", "predictions.csv", "results.ndjson", "evaluation.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }

    let regen = dir.path().join("regen");
    let o = run(&["report", "--evaluation", p(&a.join("evaluation.json")), "--out", p(&regen)]);
    assert!(o.status.success());
    for entry in fs::read_dir(a.join("report")).unwrap() {
        let path = entry.unwrap().path();
        let again = regen.join("report").join(path.file_name().unwrap());
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap(), "{}", path.display());
    }
}

#[test]
fn staged_subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let phantom = write_phantom(dir.path(), 8);
    let out = dir.path().join("stages");
    let f = |name: &str| out.join(name);
    let step = |args: &[&str]| {
        let o = run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };

    step(&["ingest", p(&phantom.join("dicom")), "--out", p(&out)]);
    step(&["filter", "--metadata", p(&f("metadata.ndjson")), "--out", p(&out)]);
    let report = fs::read_to_string(f("filter_report.csv")).unwrap();
    assert!(report.lines().count() > 1);
    step(&["labels", "project", "--metadata", p(&f("filtered.ndjson")), "--labels", p(&phantom.join("labels.json")), "--out", p(&out)]);
    step(&["classify", "--metadata", p(&f("filtered.ndjson")), "--truth", p(&f("truth.csv")), "--out", p(&out)]);
    let split = fs::read_to_string(f("split.csv")).unwrap();
    let train = split.lines().filter(|l| l.contains(",Train,")).count();
    assert_eq!(train, 6, "{split}");
    step(&["postprocess", "--metadata", p(&f("filtered.ndjson")), "--predictions", p(&f("predictions.csv")), "--out", p(&out)]);
    let o = step(&["evaluate", "--metadata", p(&f("filtered.ndjson")), "--truth", p(&f("truth.csv")), "--results", p(&f("results.ndjson")), "--bootstrap", "50", "--out", p(&out)]);
    assert!(stdout(&o).contains("CT:"));
    assert!(f("evaluation.json").exists());
    assert!(f("report").read_dir().unwrap().count() > 0);

    // the centroid backend without truth is a usage error
    let o = run(&["classify", "--metadata", p(&f("filtered.ndjson")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tag_write_dry_run_leaves_files_alone() {
    let dir = tempfile::tempdir().unwrap();
    let phantom = write_phantom(dir.path(), 8);
    let files: Vec<_> = walk(&phantom.join("dicom"));
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    let out = dir.path().join("run");
    let o = run(&[
        "run",
        "--dicom",
        p(&phantom.join("dicom")),
        "--labels",
        p(&phantom.join("labels.json")),
        "--bootstrap",
        "20",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());

    let o = run(&[
        "tag-write",
        "--metadata",
        p(&out.join("metadata.ndjson")),
        "--results",
        p(&out.join("results.ndjson")),
        "--dry-run",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("0 written"), "{}", stdout(&o));
    let log = fs::read_to_string(out.join("tag_changes.csv")).unwrap();
    assert_eq!(log.lines().count(), files.len() + 1);
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&fs::read(f).unwrap(), b);
    }
}

fn walk(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}
