#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use bodyregion::classify::BodyRegion::{self, *};
use bodyregion::stats::{EvalCohort, EvalImage, EvalSeries, EvalStudy};
use bodyregion::cli_report::report::{FactorRow, FactorSection, Interval, RegionRow};
use bodyregion::cli_report::ReportData;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn iv(point: f64, lo: f64, hi: f64) -> Option<Interval> {
    Some(Interval { point, lo, hi })
}

fn frow(category: &str, n: usize, total: usize, sens: Option<Interval>, spec: Option<Interval>) -> FactorRow {
    FactorRow {
        category: category.into(),
        n,
        percent: 100.0 * n as f64 / total as f64,
        sensitivity: sens,
        specificity: spec,
    }
}

fn section(label: &str, rows: Vec<FactorRow>, p_value: Option<f64>) -> FactorSection {
    FactorSection {
        label: label.into(),
        rows,
        statistic: None,
        df: None,
        p_value,
        cramers_v: None,
        association: None,
    }
}

/// Report contents behind the files in fixtures/golden.
pub fn golden_report() -> ReportData {
    let region = |label: &str, n, sensitivity, specificity| RegionRow {
        label: label.into(),
        n,
        sensitivity,
        specificity,
    };
    ReportData {
        modality: "MR".into(),
        level: 0.95,
        regions: vec![
            region("Overall", 12_345, iv(0.924, 0.921, 0.928), None),
            region("Chest", 1_204, iv(0.975, 0.96, 0.983), iv(0.991, 0.988, 0.994)),
            region("Knee", 3, None, None),
        ],
        factors: vec![
            section(
                "Gender",
                vec![
                    frow("Female", 1500, 2700, iv(0.93, 0.92, 0.94), iv(0.995, 0.994, 0.996)),
                    frow("Male", 1196, 2700, iv(0.915, 0.902, 0.926), iv(0.994, 0.993, 0.995)),
                    frow("Unknown", 4, 2700, None, None),
                ],
                Some(0.0012),
            ),
            section(
                "MRI Sequence*",
                vec![
                    frow("Spin echo", 2000, 2500, iv(0.941, 0.933, 0.949), iv(0.996, 0.995, 0.997)),
                    frow("Diffusion", 500, 2500, iv(0.85, 0.821, 0.874), iv(0.991, 0.989, 0.993)),
                ],
                Some(9.7e-16),
            ),
            section("Imaging Center", vec![frow("A", 4, 4, None, None)], None),
        ],
    }
}

/// Emits the golden report into `dir` and returns the names of files that
/// differ from the fixtures.
pub fn golden_mismatches(dir: &Path) -> Vec<String> {
    let data = golden_report();
    let json = serde_json::to_string(&data).unwrap();
    let data: ReportData = serde_json::from_str(&json).unwrap();
    let written = bodyregion::cli_report::emit_report(&data, dir).unwrap();
    let mut bad = Vec::new();
    for path in written {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let got = std::fs::read_to_string(&path).unwrap();
        let want = std::fs::read_to_string(fixture(&format!("golden/{name}"))).unwrap();
        if got != want {
            bad.push(format!("{name}:\n--- got\n{got}--- want\n{want}"));
        }
    }
    bad
}

const COVERAGE_REGIONS: [BodyRegion; 5] = [Head, Neck, Chest, Abdomen, Pelvis];

/// `n` single-series studies. Each is a run of 3 to 8 slabs; a slab is two
/// images 5 mm apart that share their correctness, and each study has its
/// own accuracy drawn from Beta(9, 1). The image-weighted accuracy of the
/// population is therefore exactly 0.9.
pub fn slab_cohort(rng: &mut ChaCha8Rng, n: usize) -> EvalCohort {
    let studies = (0..n)
        .map(|s| {
            let p = rng.random::<f64>().powf(1.0 / 9.0);
            let slabs = rng.random_range(3..=8);
            let mut images = Vec::new();
            for j in 0..slabs {
                let truth = COVERAGE_REGIONS[rng.random_range(0..COVERAGE_REGIONS.len())];
                let predicted = if rng.random_bool(p) {
                    truth
                } else {
                    let other = COVERAGE_REGIONS.iter().copied().filter(|r| *r != truth).collect::<Vec<_>>();
                    other[rng.random_range(0..other.len())]
                };
                for k in 0..2 {
                    images.push(EvalImage {
                        sop_uid: format!("{s}.{j}.{k}"),
                        position: 10.0 * j as f64 + 5.0 * k as f64,
                        truth,
                        predicted: Some(predicted),
                    });
                }
            }
            EvalStudy {
                study_uid: format!("study{s}"),
                series: vec![EvalSeries {
                    series_uid: format!("series{s}"),
                    images,
                }],
            }
        })
        .collect();
    EvalCohort { studies }
}
