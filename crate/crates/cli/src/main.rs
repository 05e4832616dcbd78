//! `bodyregion`: ingest DICOM studies, classify body regions per image,
//! apply the series rules and evaluate against ground-truth boxes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bodyregion::classify::{Backend, ScoreTable};
use bodyregion::cli_report::config::{BackendKind, ConfigError, Overrides, PipelineConfig};
use bodyregion::cli_report::phantom::{generate_phantom, PhantomSpec};
use bodyregion::cli_report::pipeline::{self as stages, Evaluation, PipelineError};
use bodyregion::cli_report::report::emit_report;
use bodyregion::cli_report::tagwrite::{write_body_part_tags, write_change_log, TagAction};
use bodyregion::cohort::{filter_cohort, Split};
use bodyregion::geometry::read_label_file;
use bodyregion::ingest::{ingest_tree, StudyRecord};
use bodyregion::postprocess::{SeriesOutcome, UncertaintyMetric};
use bodyregion::stats::{implied_design_effect, sample_size, sample_size_raw};

#[derive(Parser, Debug)]
#[command(name = "bodyregion", version, about = "Body-region classification pipeline for CT and MR series")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Pipeline configuration (TOML); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Score CSV for the scores backend.
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_metric)]
    metric: Option<UncertaintyMetric>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Image sampling distance for the bootstrap, mm.
    #[arg(long = "step-mm", global = true)]
    step_mm: Option<f64>,
    /// Bootstrap resamples.
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    /// Confidence level of the intervals.
    #[arg(long, global = true)]
    level: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Report changes without modifying files.
    #[arg(long = "dry-run", global = true)]
    dry_run: bool,
    /// Exclude series with inconsistent slice geometry.
    #[arg(long = "strict-geometry", global = true)]
    strict_geometry: bool,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

fn parse_metric(s: &str) -> Result<UncertaintyMetric, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a DICOM tree into metadata.ndjson.
    Ingest { dicom: PathBuf },
    /// Apply the inclusion rules; writes filtered.ndjson and filter_report.csv.
    Filter {
        #[arg(long)]
        metadata: PathBuf,
    },
    /// Ground-truth label operations.
    Labels {
        #[command(subcommand)]
        command: LabelsCommand,
    },
    /// Per-image class probabilities; writes predictions.csv.
    ///
    /// The centroid backend trains on the train split of --truth, writes
    /// split.csv and classifies the validation studies.
    Classify {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Series rules over predictions; writes results.ndjson.
    Postprocess {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Bootstrap tables, factor tests and tag agreement.
    Evaluate {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Render report tables from evaluation.json.
    Report {
        #[arg(long)]
        evaluation: PathBuf,
    },
    /// Studies needed to estimate a proportion.
    SampleSize {
        /// Expected proportion.
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long = "relative-error", default_value_t = 0.1)]
        relative_error: f64,
        /// Design effect.
        #[arg(long, default_value_t = 1.0)]
        deff: f64,
        /// Also print the design effect implied by this sample size.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Generate a synthetic cohort from a TOML spec.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Write predicted regions to BodyPartExamined; logs to tag_changes.csv.
    TagWrite {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// All stages from a DICOM tree and a label file.
    Run {
        #[arg(long)]
        dicom: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum LabelsCommand {
    /// Project label boxes onto images; writes truth.csv.
    Project {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig, CliError> {
    let overrides = Overrides {
        seed: g.seed,
        backend: g.backend,
        scores: g.scores.clone(),
        metric: g.metric,
        threshold: g.threshold,
        step_mm: g.step_mm,
        resamples: g.bootstrap,
        level: g.level,
        strict_geometry: g.strict_geometry,
    };
    Ok(PipelineConfig::load(g.config.as_deref(), &overrides)?)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn split_studies(studies: &[StudyRecord], split: &[bodyregion::cohort::PartitionAssignment], which: Split) -> Vec<StudyRecord> {
    let by_study: BTreeMap<&str, Split> = split.iter().map(|a| (a.study_uid.as_str(), a.split)).collect();
    studies
        .iter()
        .filter(|s| by_study.get(s.study_uid.as_str()) == Some(&which))
        .cloned()
        .collect()
}

fn ingest(g: &GlobalArgs, dicom: &Path) -> Result<(), CliError> {
    let report = ingest_tree(dicom);
    stages::save_metadata(&g.out.join("metadata.ndjson"), &report.studies)?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.error);
    }
    let images: usize = report.studies.iter().map(StudyRecord::image_count).sum();
    println!("{} studies, {images} images, {} files skipped", report.studies.len(), report.skipped.len());
    if report.studies.is_empty() {
        return Err(data(format!("no DICOM studies found under {}", dicom.display())));
    }
    Ok(())
}

fn filter(g: &GlobalArgs, metadata: &Path) -> Result<(), CliError> {
    let config = load_config(g)?;
    let studies = stages::load_metadata(metadata)?;
    let (kept, rows) = filter_cohort(&studies, &config.filter);
    stages::save_filter_report(&g.out.join("filter_report.csv"), &rows)?;
    stages::save_metadata(&g.out.join("filtered.ndjson"), &kept)?;
    println!("{} of {} studies kept", kept.len(), studies.len());
    Ok(())
}

fn project(g: &GlobalArgs, metadata: &Path, labels: &Path) -> Result<(), CliError> {
    let studies = stages::load_metadata(metadata)?;
    let boxes = read_label_file(labels).map_err(data)?;
    let (truth, warnings) = stages::project_truth(&studies, &boxes);
    warn_all(&warnings);
    stages::save_truth(&g.out.join("truth.csv"), &truth)?;
    println!("{} images labeled", truth.len());
    Ok(())
}

fn classify(g: &GlobalArgs, metadata: &Path, truth: Option<&Path>) -> Result<(), CliError> {
    let config = load_config(g)?;
    let studies = stages::load_metadata(metadata)?;
    let mut warnings = Vec::new();
    let (backend, targets): (Box<dyn Backend>, Vec<StudyRecord>) = match config.classify.backend {
        BackendKind::Scores => {
            let path = config.classify.scores.as_deref().ok_or(ConfigError::MissingScores)?;
            (Box::new(stages::load_score_file(path)?), studies)
        }
        BackendKind::Centroid => {
            let path = truth.ok_or_else(|| CliError::Usage("the centroid backend needs --truth".into()))?;
            let truth: HashMap<_, _> = stages::load_truth(path)?;
            let split = stages::partition(&studies, &truth, config.classify.train_ratio)?;
            stages::save_split(&g.out.join("split.csv"), &split)?;
            let model = stages::train_centroid(&split_studies(&studies, &split, Split::Train), &truth, &mut warnings)?;
            (Box::new(model), split_studies(&studies, &split, Split::Validation))
        }
    };
    let table: ScoreTable = stages::classify_studies(&targets, backend.as_ref(), config.classify.batch_size, &mut warnings)?;
    warn_all(&warnings);
    stages::save_scores(&g.out.join("predictions.csv"), &table)?;
    println!("{} images classified", table.len());
    Ok(())
}

fn postprocess(g: &GlobalArgs, metadata: &Path, predictions: &Path) -> Result<(), CliError> {
    let config = load_config(g)?;
    let studies = stages::load_metadata(metadata)?;
    let scores = stages::load_score_file(predictions)?;
    let mut warnings = Vec::new();
    let results = stages::postprocess_studies(&studies, &scores, &config.postprocess, &mut warnings);
    warn_all(&warnings);
    let outcomes: Vec<SeriesOutcome> = results.iter().map(SeriesOutcome::from).collect();
    stages::save_results(&g.out.join("results.ndjson"), &outcomes)?;
    let rejected = outcomes.iter().filter(|o| o.status != bodyregion::postprocess::SeriesStatus::Accepted).count();
    println!("{} series, {rejected} rejected", outcomes.len());
    Ok(())
}

fn evaluate(g: &GlobalArgs, metadata: &Path, truth: &Path, results: &Path) -> Result<(), CliError> {
    let config = load_config(g)?;
    let studies = stages::load_metadata(metadata)?;
    let truth = stages::load_truth(truth)?;
    let outcomes = stages::load_results(results)?;
    let synonyms = stages::load_synonyms(config.evaluation.synonyms.as_deref())?;
    let (evaluation, agreements) = stages::evaluate(&studies, &truth, &outcomes, &config, &synonyms)?;
    warn_all(&evaluation.warnings);
    stages::write_evaluation(&g.out, &evaluation, &agreements)?;
    for m in &evaluation.modalities {
        match m.accuracy {
            Some(a) => println!("{}: {} images, accuracy {:.4}", m.modality, m.images, a),
            None => println!("{}: no evaluable images", m.modality),
        }
    }
    Ok(())
}

fn report(g: &GlobalArgs, evaluation: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(evaluation).map_err(|e| data(format!("{}: {e}", evaluation.display())))?;
    let parsed: Evaluation = serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", evaluation.display())))?;
    let dir = g.out.join("report");
    for m in &parsed.modalities {
        for path in emit_report(&m.report, &dir).map_err(data)? {
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn sample_size_cmd(p: f64, confidence: f64, relative_error: f64, deff: f64, target: Option<f64>) -> Result<(), CliError> {
    let usage = |e: bodyregion::stats::SampleSizeError| CliError::Usage(e.to_string());
    let n = sample_size(p, confidence, relative_error, deff).map_err(usage)?;
    let raw = sample_size_raw(p, confidence, relative_error, deff).map_err(usage)?;
    println!("n = {n} (unrounded {raw:.3})");
    if let Some(t) = target {
        let d = implied_design_effect(t, p, confidence, relative_error).map_err(usage)?;
        println!("design effect implied by n = {t}: {d:.3}");
    }
    Ok(())
}

fn phantom(g: &GlobalArgs, spec: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
    let mut parsed: PhantomSpec = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
    if let Some(seed) = g.seed {
        parsed.seed = seed;
    }
    let summary = generate_phantom(&parsed, &g.out).map_err(|e| match e {
        bodyregion::cli_report::PhantomError::InvalidSpec(m) => CliError::Usage(m),
        other => data(other),
    })?;
    println!("{} studies, {} images, {} boxes", summary.studies, summary.images, summary.boxes.len());
    Ok(())
}

fn tag_write(g: &GlobalArgs, metadata: &Path, results: &Path) -> Result<(), CliError> {
    let studies = stages::load_metadata(metadata)?;
    let outcomes = stages::load_results(results)?;
    let log = write_body_part_tags(&studies, &outcomes, g.dry_run);
    let path = g.out.join("tag_changes.csv");
    std::fs::create_dir_all(&g.out).map_err(data)?;
    let file = std::fs::File::create(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    write_change_log(&log, file).map_err(data)?;
    let count = |a: TagAction| log.iter().filter(|c| c.action == a).count();
    println!(
        "{} written, {} planned, {} unchanged, {} skipped, {} failed",
        count(TagAction::Written),
        count(TagAction::Planned),
        count(TagAction::Unchanged),
        count(TagAction::Skipped),
        count(TagAction::Failed)
    );
    if count(TagAction::Failed) > 0 {
        return Err(data(format!("some files could not be rewritten; see {}", path.display())));
    }
    Ok(())
}

fn run(g: &GlobalArgs, dicom: &Path, labels: &Path) -> Result<(), CliError> {
    let config = load_config(g)?;
    let summary = stages::run_all(dicom, labels, &g.out, &config)?;
    match summary.accuracy {
        Some(a) => println!("{} series evaluated, accuracy {a:.4}", summary.evaluated_series),
        None => println!("{} series evaluated, no evaluable images", summary.evaluated_series),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { dicom } => ingest(g, dicom),
        Command::Filter { metadata } => filter(g, metadata),
        Command::Labels {
            command: LabelsCommand::Project { metadata, labels },
        } => project(g, metadata, labels),
        Command::Classify { metadata, truth } => classify(g, metadata, truth.as_deref()),
        Command::Postprocess { metadata, predictions } => postprocess(g, metadata, predictions),
        Command::Evaluate { metadata, truth, results } => evaluate(g, metadata, truth, results),
        Command::Report { evaluation } => report(g, evaluation),
        Command::SampleSize {
            p,
            confidence,
            relative_error,
            deff,
            target,
        } => sample_size_cmd(*p, *confidence, *relative_error, *deff, *target),
        Command::Phantom { spec } => phantom(g, spec),
        Command::TagWrite { metadata, results } => tag_write(g, metadata, results),
        Command::Run { dicom, labels } => run(g, dicom, labels),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
