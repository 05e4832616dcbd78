use bodyregion::classify::BodyRegion::*;
use bodyregion::classify::Modality;
use bodyregion::ingest::{ImageRecord, SeriesRecord, Sex, StudyRecord};
use bodyregion::stats::bootstrap::BootstrapConfig;
use bodyregion::stats::{factor_report, EvalCohort, EvalImage, EvalSeries, EvalStudy, Factor, FactorConfig};

/// One single-image CT study per entry: (manufacturer, prediction correct).
fn cohort(entries: &[(&str, bool)]) -> (Vec<StudyRecord>, EvalCohort) {
    let mut studies = Vec::new();
    let mut eval = EvalCohort::default();
    for (i, (vendor, correct)) in entries.iter().enumerate() {
        let mut study = StudyRecord::new(format!("st{i}"));
        study.manufacturer = Some(vendor.to_string());
        study.patient_sex = Some(Sex::Female);
        let mut series = SeriesRecord::new(format!("se{i}"), Modality::Ct);
        series.images.push(ImageRecord::new(format!("im{i}"), "1.2.840.10008.1.2.1".into()));
        study.series.push(series);
        studies.push(study);
        eval.studies.push(EvalStudy {
            study_uid: format!("st{i}"),
            series: vec![EvalSeries {
                series_uid: format!("se{i}"),
                images: vec![EvalImage {
                    sop_uid: format!("im{i}"),
                    position: 0.0,
                    truth: Chest,
                    predicted: Some(if *correct { Chest } else { Abdomen }),
                }],
            }],
        });
    }
    (studies, eval)
}

fn entries() -> Vec<(&'static str, bool)> {
    let mut e = Vec::new();
    e.extend((0..500).map(|i| ("SIEMENS", i < 450)));
    e.extend((0..500).map(|i| ("GE MEDICAL SYSTEMS", i < 350)));
    e.extend([("CANON", true), ("CANON", false)]);
    e
}

fn bootstrap() -> BootstrapConfig {
    BootstrapConfig {
        resamples: 200,
        ..BootstrapConfig::default()
    }
}

#[test]
fn accuracy_gap_and_small_category() {
    let (studies, eval) = cohort(&entries());
    let report = factor_report(&studies, &eval, Factor::Manufacturer, &FactorConfig::default(), &bootstrap()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.category.as_str()).collect();
    assert_eq!(names.len(), 3, "{names:?}");

    let canon = report.rows.iter().find(|r| r.n == 2).unwrap();
    assert!(canon.sensitivity.is_none() && canon.specificity.is_none());
    assert!((canon.percent - 100.0 * 2.0 / 1002.0).abs() < 1e-12);

    // 2×2 closed form: N (ad - bc)² / (r1 r2 c1 c2) on [[450, 50], [350, 150]]
    let (a, b, c, d) = (450.0f64, 50.0, 350.0, 150.0);
    let n = a + b + c + d;
    let expected = n * (a * d - b * c).powi(2) / ((a + b) * (c + d) * (a + c) * (b + d));
    let test = report.test.as_ref().unwrap();
    assert_eq!(test.df, 1);
    assert!((test.statistic - expected).abs() < 1e-9, "{} vs {expected}", test.statistic);
    assert!(test.p_value < 0.001, "p = {}", test.p_value);

    let siemens = report.rows.iter().find(|r| r.n == 500 && r.sensitivity.unwrap().point > 0.8).unwrap();
    assert_eq!(siemens.sensitivity.unwrap().point, 0.9);
}

#[test]
fn single_category_has_no_test() {
    let (studies, eval) = cohort(&entries());
    let report = factor_report(&studies, &eval, Factor::Gender, &FactorConfig::default(), &bootstrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].category, "Female");
    assert_eq!(report.rows[0].n, 1002);
    assert!(report.test.is_none());
    assert!(report.cramers_v.is_none());
}
