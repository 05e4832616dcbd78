//! Evaluation tables in CSV and Markdown.
//!
//! The region table lists an Overall row followed by one row per region with
//! images; factor tables list one row per category with its share of the
//! cohort, and carry the factor's p-value on their first row. Cells for
//! under-populated rows read "NA".

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classify::BodyRegion;
use crate::stats::bootstrap::{bootstrap_many, BootstrapConfig, BootstrapError, CIResult, Metric};
use crate::stats::{EvalCohort, FactorReport};

/// A point estimate with its interval, as proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl From<CIResult> for Interval {
    fn from(ci: CIResult) -> Self {
        Interval {
            point: ci.point,
            lo: ci.lo,
            hi: ci.hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    /// "Overall" or a region's display name.
    pub label: String,
    /// Images with this truth region.
    pub n: u64,
    pub sensitivity: Option<Interval>,
    pub specificity: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub category: String,
    pub n: usize,
    pub percent: f64,
    pub sensitivity: Option<Interval>,
    pub specificity: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSection {
    /// Label as shown, with `*` marking series-level factors.
    pub label: String,
    pub rows: Vec<FactorRow>,
    pub statistic: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
    pub cramers_v: Option<f64>,
    pub association: Option<String>,
}

impl From<&FactorReport> for FactorSection {
    fn from(r: &FactorReport) -> Self {
        let mut label = r.factor.label().to_string();
        if r.factor.series_level() {
            label.push('*');
        }
        FactorSection {
            label,
            rows: r
                .rows
                .iter()
                .map(|row| FactorRow {
                    category: row.category.clone(),
                    n: row.n,
                    percent: row.percent,
                    sensitivity: row.sensitivity.map(Interval::from),
                    specificity: row.specificity.map(Interval::from),
                })
                .collect(),
            statistic: r.test.as_ref().map(|t| t.statistic),
            df: r.test.as_ref().map(|t| t.df),
            p_value: r.test.as_ref().map(|t| t.p_value),
            cramers_v: r.cramers_v.map(|(v, _)| v),
            association: r.cramers_v.map(|(_, a)| a.as_str().to_string()),
        }
    }
}

/// Everything needed to render one modality's tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportData {
    pub modality: String,
    pub level: f64,
    pub regions: Vec<RegionRow>,
    pub factors: Vec<FactorSection>,
}

/// Overall and per-region rows; regions without images are omitted.
pub fn region_rows(cohort: &EvalCohort, min_count: u64, bootstrap: &BootstrapConfig) -> Result<Vec<RegionRow>, BootstrapError> {
    let cm = cohort.confusion();
    let total = cm.total();
    let present: Vec<BodyRegion> = BodyRegion::output_regions()
        .filter(|r| cm.support(r.canonical_index()) > 0)
        .collect();
    if total == 0 {
        return Ok(Vec::new());
    }
    type Boxed = Box<dyn Fn(&crate::stats::ConfusionMatrix) -> Option<f64> + Sync>;
    let mut owned: Vec<Boxed> = vec![
        Box::new(crate::stats::bootstrap::weighted_sensitivity_metric),
        Box::new(crate::stats::bootstrap::weighted_specificity_metric),
    ];
    for &r in &present {
        owned.push(Box::new(move |m| m.sensitivity(r).ok().flatten()));
        owned.push(Box::new(move |m| m.specificity(r).ok().flatten()));
    }
    let metrics: Vec<Metric> = owned.iter().map(|b| b.as_ref() as Metric).collect();
    let results = bootstrap_many(cohort, &metrics, bootstrap)?;
    let ci = |j: usize, n: u64| {
        if n < min_count {
            return None;
        }
        results[j].as_ref().ok().map(|c| Interval::from(*c))
    };
    let mut rows = vec![RegionRow {
        label: "Overall".into(),
        n: total,
        sensitivity: ci(0, total),
        specificity: ci(1, total),
    }];
    for (k, &r) in present.iter().enumerate() {
        let n = cm.support(r.canonical_index());
        rows.push(RegionRow {
            label: r.display_name().into(),
            n,
            sensitivity: ci(2 + 2 * k, n),
            specificity: ci(3 + 2 * k, n),
        });
    }
    Ok(rows)
}

/// `92.4 (92.1 - 92.8)`, in percent.
pub fn format_interval(i: &Interval) -> String {
    format!("{:.1} ({:.1} - {:.1})", 100.0 * i.point, 100.0 * i.lo, 100.0 * i.hi)
}

/// Three decimals down to 0.001, scientific notation below.
pub fn format_p_value(p: f64) -> String {
    if p >= 0.001 {
        format!("{p:.3}")
    } else {
        format!("{p:.1e}")
    }
}

pub fn with_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn ci_heading(level: f64) -> String {
    // rounded so that e.g. 0.9 prints as 90, not 90.00000000000001
    format!("{}% CI", (1000.0 * level).round() / 10.0)
}

fn cell(i: &Option<Interval>) -> String {
    i.as_ref().map_or_else(|| "NA".to_string(), format_interval)
}

fn plain(i: &Option<Interval>) -> [String; 3] {
    match i {
        Some(i) => [format!("{:.4}", i.point), format!("{:.4}", i.lo), format!("{:.4}", i.hi)],
        None => ["NA".into(), "NA".into(), "NA".into()],
    }
}

pub fn write_regions_csv<W: Write>(data: &ReportData, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "region",
        "n",
        "sensitivity",
        "sensitivity_lo",
        "sensitivity_hi",
        "specificity",
        "specificity_lo",
        "specificity_hi",
    ])?;
    for row in &data.regions {
        let mut rec = vec![row.label.clone(), row.n.to_string()];
        rec.extend(plain(&row.sensitivity));
        rec.extend(plain(&row.specificity));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_factors_csv<W: Write>(data: &ReportData, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "factor",
        "category",
        "n",
        "percent",
        "sensitivity",
        "sensitivity_lo",
        "sensitivity_hi",
        "specificity",
        "specificity_lo",
        "specificity_hi",
        "p_value",
    ])?;
    for section in &data.factors {
        for (i, row) in section.rows.iter().enumerate() {
            let mut rec = vec![section.label.clone(), row.category.clone(), row.n.to_string(), format!("{:.1}", row.percent)];
            rec.extend(plain(&row.sensitivity));
            rec.extend(plain(&row.specificity));
            rec.push(match (i, section.p_value) {
                (0, Some(p)) => format_p_value(p),
                (0, None) => "NA".into(),
                _ => String::new(),
            });
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn regions_markdown(data: &ReportData) -> String {
    let ci = ci_heading(data.level);
    let mut s = format!("| Body Region | n | Sensitivity ({ci}) | Specificity ({ci}) |\n|---|---:|---|---|\n");
    for row in &data.regions {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            row.label,
            with_thousands(row.n),
            cell(&row.sensitivity),
            cell(&row.specificity)
        );
    }
    s
}

pub fn factors_markdown(data: &ReportData) -> String {
    let ci = ci_heading(data.level);
    let mut s = format!(
        "| Factor | Category | n (%) | Sensitivity ({ci}) | Specificity ({ci}) | p-value |\n|---|---|---:|---|---|---|\n"
    );
    for section in &data.factors {
        for (i, row) in section.rows.iter().enumerate() {
            let (label, p) = if i == 0 {
                (section.label.as_str(), section.p_value.map_or_else(|| "NA".into(), format_p_value))
            } else {
                ("", String::new())
            };
            let _ = writeln!(
                s,
                "| {label} | {} | {} ({:.1}) | {} | {} | {p} |",
                row.category,
                with_thousands(row.n as u64),
                row.percent,
                cell(&row.sensitivity),
                cell(&row.specificity)
            );
        }
    }
    s
}

/// Output file stem for a modality, e.g. `ct`.
pub fn file_stem(modality: &str) -> String {
    modality.to_ascii_lowercase().chars().filter(char::is_ascii_alphanumeric).collect()
}

/// Writes `<stem>_regions.{csv,md}` and `<stem>_factors.{csv,md}` under `dir`.
pub fn emit_report(data: &ReportData, dir: &std::path::Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let stem = file_stem(&data.modality);
    let paths = [
        dir.join(format!("{stem}_regions.csv")),
        dir.join(format!("{stem}_regions.md")),
        dir.join(format!("{stem}_factors.csv")),
        dir.join(format!("{stem}_factors.md")),
    ];
    let mut buf = Vec::new();
    write_regions_csv(data, &mut buf).map_err(std::io::Error::other)?;
    std::fs::write(&paths[0], &buf)?;
    std::fs::write(&paths[1], regions_markdown(data))?;
    buf.clear();
    write_factors_csv(data, &mut buf).map_err(std::io::Error::other)?;
    std::fs::write(&paths[2], &buf)?;
    std::fs::write(&paths[3], factors_markdown(data))?;
    Ok(paths.to_vec())
}
