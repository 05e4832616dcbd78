//! Pipeline stages shared by the subcommands, and the end-to-end run.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::centroid::block_features;
use crate::classify::{
    classify_images, load_scores, write_scores, Backend, BodyRegion, CentroidBackend, CentroidError, ClassSet,
    ClassifyError, Modality, Prediction, ScoreTable, ScoresError,
};
use crate::cohort::{
    dedupe_patients, filter_cohort, partition_patients, write_filter_report, CohortError, PartitionAssignment,
    PartitionInput, Split,
};
use crate::geometry::{project_box_labels, read_label_file, BoundingBox3D, LabelFileError};
use crate::ingest::{
    ingest_tree, load_pixels, read_metadata_ndjson, write_metadata_ndjson, ImageRecord, NdjsonError, SeriesRecord,
    StudyRecord,
};
use crate::postprocess::{read_results_ndjson, run_pipeline, write_results_ndjson, PostprocessConfig, ResultsError, SeriesOutcome, SeriesResult, SeriesStatus};
use crate::preprocess::{preprocess, NormalizedImage, INPUT_SIZE};
use crate::stats::bootstrap::{jackknife, weighted_sensitivity_metric, BootstrapError};
use crate::stats::{
    build_eval_cohort, factor_report, study_predictions, tag_agreement, EvalCohort, Factor, FactorError, SynonymError,
    SynonymMap, TagAgreement, TagKind,
};

use super::config::{BackendKind, ConfigError, PipelineConfig};
use super::files::{read_truth_csv, write_split_csv, write_truth_csv, CsvFileError};
use super::report::{emit_report, region_rows, FactorSection, ReportData};

/// Images loaded and normalized at once; bounds memory on long series.
const CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Labels(#[from] LabelFileError),
    #[error(transparent)]
    Metadata(#[from] NdjsonError),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Scores(#[from] ScoresError),
    #[error(transparent)]
    CsvFile(#[from] CsvFileError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Centroid(#[from] CentroidError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Synonyms(#[from] SynonymError),
    #[error("{0}")]
    NoData(String),
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_error(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::new(File::open(path).map_err(io_error(path))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_error(path)(e.into()))?;
    w.write_all(b"\n").map_err(io_error(path))?;
    w.flush().map_err(io_error(path))
}

pub fn save_metadata(path: &Path, studies: &[StudyRecord]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_metadata_ndjson(studies, &mut w)?;
    w.flush().map_err(io_error(path))
}

pub fn load_metadata(path: &Path) -> Result<Vec<StudyRecord>, PipelineError> {
    Ok(read_metadata_ndjson(open(path)?)?)
}

pub fn save_truth(path: &Path, truth: &[(String, BodyRegion)]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_truth_csv(truth, &mut w)?;
    w.flush().map_err(io_error(path))
}

pub fn load_truth(path: &Path) -> Result<HashMap<String, BodyRegion>, PipelineError> {
    Ok(read_truth_csv(open(path)?)?)
}

pub fn save_results(path: &Path, outcomes: &[SeriesOutcome]) -> Result<(), PipelineError> {
    write_results_ndjson(outcomes, create(path)?).map_err(io_error(path))
}

pub fn load_results(path: &Path) -> Result<Vec<SeriesOutcome>, PipelineError> {
    Ok(read_results_ndjson(open(path)?)?)
}

pub fn save_scores(path: &Path, table: &ScoreTable) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_scores(table, &mut w)?;
    w.flush().map_err(io_error(path))
}

pub fn load_score_file(path: &Path) -> Result<ScoreTable, PipelineError> {
    Ok(load_scores(open(path)?)?)
}

pub fn save_filter_report(path: &Path, rows: &[crate::cohort::FilterRow]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_filter_report(rows, &mut w)?;
    w.flush().map_err(io_error(path))
}

pub fn save_split(path: &Path, rows: &[PartitionAssignment]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_split_csv(rows, &mut w)?;
    w.flush().map_err(io_error(path))
}

/// Per-image truth from label boxes, in series order. Series whose
/// geometry cannot be resolved are reported and left out.
pub fn project_truth(studies: &[StudyRecord], boxes: &[BoundingBox3D]) -> (Vec<(String, BodyRegion)>, Vec<String>) {
    let mut truth = Vec::new();
    let mut warnings = Vec::new();
    for series in studies.iter().flat_map(|s| &s.series) {
        match project_box_labels(boxes, series) {
            Ok(p) => {
                warnings.extend(p.warnings.iter().map(|w| format!("series {}: {w:?}", series.series_uid)));
                for (image, label) in series.images.iter().zip(p.labels) {
                    if let Some(region) = label {
                        truth.push((image.sop_uid.clone(), region));
                    }
                }
            }
            Err(e) => warnings.push(format!("series {}: {e}", series.series_uid)),
        }
    }
    (truth, warnings)
}

/// The study's most frequent truth region, earliest class on ties.
pub fn predominant_truth(study: &StudyRecord, truth: &HashMap<String, BodyRegion>) -> Option<BodyRegion> {
    let mut counts = [0usize; BodyRegion::ALL.len()];
    for (_, image) in study.images() {
        if let Some(r) = truth.get(&image.sop_uid) {
            counts[r.canonical_index()] += 1;
        }
    }
    let (k, &c) = counts.iter().enumerate().rev().max_by_key(|(_, c)| **c)?;
    (c > 0).then(|| BodyRegion::ALL[k])
}

/// Train/validation split by predominant truth region; studies without
/// truth are not assigned.
pub fn partition(studies: &[StudyRecord], truth: &HashMap<String, BodyRegion>, ratio: f64) -> Result<Vec<PartitionAssignment>, PipelineError> {
    let inputs: Vec<PartitionInput> = studies
        .iter()
        .filter_map(|s| {
            Some(PartitionInput {
                study_uid: s.study_uid.clone(),
                region: predominant_truth(s, truth)?,
                image_count: s.image_count(),
            })
        })
        .collect();
    Ok(partition_patients(&inputs, ratio)?)
}

/// Loads and normalizes images in parallel. Images that fail to load are
/// reported and skipped. Backends that ignore pixels get empty images.
pub fn normalize_images(images: &[&ImageRecord], needs_pixels: bool, warnings: &mut Vec<String>) -> Vec<NormalizedImage> {
    if !needs_pixels {
        return images
            .iter()
            .map(|im| NormalizedImage {
                values: Array2::zeros((0, 0)),
                source_sop_uid: im.sop_uid.clone(),
                original_shape: (0, 0),
            })
            .collect();
    }
    let loaded: Vec<Result<NormalizedImage, String>> = images
        .par_iter()
        .map(|im| {
            let pixels = match &im.pixels {
                Some(p) => p.clone(),
                None => load_pixels(im).map_err(|e| format!("image {}: {e}", im.sop_uid))?,
            };
            preprocess(&im.sop_uid, &pixels, INPUT_SIZE).map_err(|e| format!("image {}: {e}", im.sop_uid))
        })
        .collect();
    let mut out = Vec::with_capacity(loaded.len());
    for r in loaded {
        match r {
            Ok(im) => out.push(im),
            Err(w) => warnings.push(w),
        }
    }
    out
}

/// Trains the centroid baseline on every truth-labeled image of `studies`.
pub fn train_centroid(
    studies: &[StudyRecord],
    truth: &HashMap<String, BodyRegion>,
    warnings: &mut Vec<String>,
) -> Result<CentroidBackend, PipelineError> {
    let images: Vec<&ImageRecord> = studies
        .iter()
        .flat_map(|s| s.images().map(|(_, im)| im))
        .filter(|im| truth.contains_key(&im.sop_uid))
        .collect();
    let mut examples = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        for im in normalize_images(chunk, true, warnings) {
            let f = block_features(&im).ok_or_else(|| CentroidError::EmptyImage(im.source_sop_uid.clone()))?;
            examples.push((f, truth[&im.source_sop_uid]));
        }
    }
    let mut regions: Vec<BodyRegion> = examples.iter().map(|(_, r)| *r).collect();
    regions.sort();
    regions.dedup();
    let classes = ClassSet::new(regions).map_err(|_| CentroidError::EmptyTrainingSet)?;
    Ok(CentroidBackend::from_features(examples, classes)?)
}

/// Classifies every image of `studies`; the table's classes are the backend's.
pub fn classify_studies(
    studies: &[StudyRecord],
    backend: &dyn Backend,
    batch_size: usize,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable, PipelineError> {
    let mut table = ScoreTable::new(backend.classes().clone());
    let images: Vec<&ImageRecord> = studies.iter().flat_map(|s| s.images().map(|(_, im)| im)).collect();
    for chunk in images.chunks(CHUNK) {
        let normalized = normalize_images(chunk, backend.needs_pixels(), warnings);
        for p in classify_images(&normalized, backend, batch_size)? {
            table.insert(p.sop_uid, p.probabilities);
        }
    }
    Ok(table)
}

/// Runs the series rules on every series with scores. Images without a
/// score are reported; series with none are skipped.
pub fn postprocess_studies(
    studies: &[StudyRecord],
    scores: &ScoreTable,
    config: &PostprocessConfig,
    warnings: &mut Vec<String>,
) -> Vec<SeriesResult> {
    let series: Vec<&SeriesRecord> = studies.iter().flat_map(|s| &s.series).collect();
    let results: Vec<(Option<SeriesResult>, Vec<String>)> = series
        .par_iter()
        .map(|series| {
            let mut notes = Vec::new();
            let mut predictions = Vec::with_capacity(series.images.len());
            for im in &series.images {
                match scores.get(&im.sop_uid) {
                    Some(p) => match Prediction::new(im.sop_uid.clone(), scores.classes().clone(), p.to_vec()) {
                        Ok(p) => predictions.push(p),
                        Err(e) => notes.push(format!("image {}: {e}", im.sop_uid)),
                    },
                    None => notes.push(format!("image {}: no score", im.sop_uid)),
                }
            }
            if predictions.is_empty() {
                return (None, notes);
            }
            match run_pipeline(&series.series_uid, &predictions, &series.modality, config) {
                Ok(r) => (Some(r), notes),
                Err(e) => {
                    notes.push(format!("series {}: {e}", series.series_uid));
                    (None, notes)
                }
            }
        })
        .collect();
    let mut out = Vec::new();
    for (r, notes) in results {
        warnings.extend(notes);
        out.extend(r);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub kind: String,
    pub matched: usize,
    pub studies: usize,
    pub fraction: Option<f64>,
}

impl From<&TagAgreement> for AgreementSummary {
    fn from(a: &TagAgreement) -> Self {
        AgreementSummary {
            kind: match a.kind {
                TagKind::BodyPart => "body_part".into(),
                TagKind::Procedure => "procedure".into(),
            },
            matched: a.matched,
            studies: a.studies,
            fraction: a.fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEvaluation {
    pub modality: String,
    pub studies: usize,
    pub series: usize,
    pub rejected_series: usize,
    /// Images with a final label and known truth.
    pub images: u64,
    pub correct: u64,
    pub accuracy: Option<f64>,
    pub jackknife_standard_error: Option<f64>,
    pub jackknife_bias: Option<f64>,
    pub report: ReportData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub resamples: usize,
    pub modalities: Vec<ModalityEvaluation>,
    pub tag_agreement: Vec<AgreementSummary>,
    pub warnings: Vec<String>,
}

/// Region and factor tables per modality, jackknife error of weighted
/// sensitivity, and tag agreement.
pub fn evaluate(
    studies: &[StudyRecord],
    truth: &HashMap<String, BodyRegion>,
    outcomes: &[SeriesOutcome],
    config: &PipelineConfig,
    synonyms: &SynonymMap,
) -> Result<(Evaluation, Vec<TagAgreement>), PipelineError> {
    let (cohort, mut warnings) = build_eval_cohort(studies, truth, outcomes);
    let bootstrap = config.bootstrap();
    let modality_of: HashMap<&str, &Modality> = outcomes.iter().map(|o| (o.series_uid.as_str(), &o.modality)).collect();
    let mut modalities: Vec<&Modality> = outcomes.iter().map(|o| &o.modality).collect();
    modalities.sort();
    modalities.dedup();

    let mut evaluations = Vec::new();
    for modality in modalities {
        let subset: EvalCohort = cohort.select(|_, series| modality_of.get(series) == Some(&modality));
        let in_modality: Vec<&SeriesOutcome> = outcomes.iter().filter(|o| &o.modality == modality).collect();
        let cm = subset.confusion();
        let mut report = ReportData {
            modality: modality.as_str().to_string(),
            level: bootstrap.level,
            regions: Vec::new(),
            factors: Vec::new(),
        };
        let mut jk = None;
        if !subset.studies.is_empty() {
            report.regions = match region_rows(&subset, config.evaluation.min_count as u64, &bootstrap) {
                Ok(rows) => rows,
                Err(BootstrapError::UndefinedMetric) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            for factor in Factor::ALL.into_iter().filter(|f| f.applies_to(modality)) {
                let r = factor_report(studies, &subset, factor, &config.factors(), &bootstrap)?;
                if !r.rows.is_empty() {
                    report.factors.push(FactorSection::from(&r));
                }
            }
            jk = jackknife(&subset, &weighted_sensitivity_metric).ok();
        }
        evaluations.push(ModalityEvaluation {
            modality: modality.as_str().to_string(),
            studies: subset.studies.len(),
            series: in_modality.len(),
            rejected_series: in_modality.iter().filter(|o| o.status == SeriesStatus::RejectedUncertain).count(),
            images: cm.total(),
            correct: cm.trace(),
            accuracy: (cm.total() > 0).then(|| cm.trace() as f64 / cm.total() as f64),
            jackknife_standard_error: jk.as_ref().map(|j| j.standard_error),
            jackknife_bias: jk.as_ref().map(|j| j.bias),
            report,
        });
    }

    let predicted = study_predictions(studies, outcomes);
    let agreements: Vec<TagAgreement> = [TagKind::BodyPart, TagKind::Procedure]
        .into_iter()
        .map(|kind| tag_agreement(studies, &predicted, kind, synonyms))
        .collect();
    warnings.sort();
    Ok((
        Evaluation {
            seed: bootstrap.seed,
            resamples: bootstrap.resamples,
            modalities: evaluations,
            tag_agreement: agreements.iter().map(AgreementSummary::from).collect(),
            warnings,
        },
        agreements,
    ))
}

pub fn write_agreement_csv(path: &Path, agreements: &[TagAgreement]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["kind", "study_uid", "tag", "mapped", "predicted", "matched"])?;
    let join = |set: &std::collections::BTreeSet<BodyRegion>| set.iter().map(|r| r.name()).collect::<Vec<_>>().join(";");
    for a in agreements {
        let kind = AgreementSummary::from(a).kind;
        for row in &a.rows {
            w.write_record([
                kind.as_str(),
                &row.study_uid,
                row.tag.as_deref().unwrap_or(""),
                &join(&row.mapped),
                &join(&row.predicted),
                if row.matched { "true" } else { "false" },
            ])?;
        }
    }
    w.flush().map_err(io_error(path))
}

/// Writes `evaluation.json`, `tag_agreement.csv` and the report tables.
pub fn write_evaluation(out: &Path, evaluation: &Evaluation, agreements: &[TagAgreement]) -> Result<(), PipelineError> {
    write_json(&out.join("evaluation.json"), evaluation)?;
    write_agreement_csv(&out.join("tag_agreement.csv"), agreements)?;
    let report_dir = out.join("report");
    for m in &evaluation.modalities {
        emit_report(&m.report, &report_dir).map_err(io_error(&report_dir))?;
    }
    Ok(())
}

pub fn load_synonyms(path: Option<&Path>) -> Result<SynonymMap, PipelineError> {
    match path {
        None => Ok(SynonymMap::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_error(p))?;
            Ok(SynonymMap::from_json(&text)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub backend: BackendKind,
    pub ingested_studies: usize,
    pub skipped_files: usize,
    pub filtered_studies: usize,
    pub deduplicated_studies: usize,
    pub labeled_images: usize,
    pub train_studies: usize,
    pub validation_studies: usize,
    pub evaluated_series: usize,
    /// Final-label accuracy over evaluated images, all modalities.
    pub accuracy: Option<f64>,
    pub warnings: usize,
}

/// The full pipeline from a DICOM tree and a label file to reports in `out`.
///
/// With the centroid backend the model is trained on the train split and
/// only validation studies are classified and evaluated; with the scores
/// backend every study is. Output depends only on the inputs and config.
pub fn run_all(dicom_root: &Path, labels: &Path, out: &Path, config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let mut warnings = Vec::new();

    let ingested = ingest_tree(dicom_root);
    let mut skipped: Vec<String> = ingested.skipped.iter().map(|s| format!("{}: {}", s.path.display(), s.error)).collect();
    skipped.sort();
    warnings.extend(skipped);
    save_metadata(&out.join("metadata.ndjson"), &ingested.studies)?;

    let (filtered, rows) = filter_cohort(&ingested.studies, &config.filter);
    save_filter_report(&out.join("filter_report.csv"), &rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let deduped = dedupe_patients(&filtered, &mut rng).studies;

    let boxes = read_label_file(labels)?;
    let (truth_rows, truth_warnings) = project_truth(&deduped, &boxes);
    warnings.extend(truth_warnings);
    save_truth(&out.join("truth.csv"), &truth_rows)?;
    let truth: HashMap<String, BodyRegion> = truth_rows.iter().cloned().collect();

    let (backend, evaluated, split): (Box<dyn Backend>, Vec<StudyRecord>, Vec<PartitionAssignment>) =
        match config.classify.backend {
            BackendKind::Centroid => {
                let split = partition(&deduped, &truth, config.classify.train_ratio)?;
                save_split(&out.join("split.csv"), &split)?;
                let by_study: BTreeMap<&str, Split> = split.iter().map(|a| (a.study_uid.as_str(), a.split)).collect();
                let pick = |s: Split| -> Vec<StudyRecord> {
                    deduped.iter().filter(|st| by_study.get(st.study_uid.as_str()) == Some(&s)).cloned().collect()
                };
                let train = pick(Split::Train);
                let model = train_centroid(&train, &truth, &mut warnings)?;
                (Box::new(model), pick(Split::Validation), split)
            }
            BackendKind::Scores => {
                let path = config.classify.scores.as_deref().ok_or(ConfigError::MissingScores)?;
                (Box::new(load_score_file(path)?), deduped.clone(), Vec::new())
            }
        };
    if evaluated.is_empty() {
        return Err(PipelineError::NoData("no studies to classify".into()));
    }

    let scores = classify_studies(&evaluated, backend.as_ref(), config.classify.batch_size, &mut warnings)?;
    save_scores(&out.join("predictions.csv"), &scores)?;
    let results = postprocess_studies(&evaluated, &scores, &config.postprocess, &mut warnings);
    let outcomes: Vec<SeriesOutcome> = results.iter().map(SeriesOutcome::from).collect();
    save_results(&out.join("results.ndjson"), &outcomes)?;

    let synonyms = load_synonyms(config.evaluation.synonyms.as_deref())?;
    let (mut evaluation, agreements) = evaluate(&evaluated, &truth, &outcomes, config, &synonyms)?;
    warnings.append(&mut evaluation.warnings);
    evaluation.warnings = warnings;
    write_evaluation(out, &evaluation, &agreements)?;

    let (images, correct) = evaluation.modalities.iter().fold((0, 0), |(n, c), m| (n + m.images, c + m.correct));
    let summary = RunSummary {
        seed: config.seed,
        backend: config.classify.backend,
        ingested_studies: ingested.studies.len(),
        skipped_files: ingested.skipped.len(),
        filtered_studies: filtered.len(),
        deduplicated_studies: deduped.len(),
        labeled_images: truth_rows.len(),
        train_studies: split.iter().filter(|a| a.split == Split::Train).count(),
        validation_studies: split.iter().filter(|a| a.split == Split::Validation).count(),
        evaluated_series: outcomes.len(),
        accuracy: (images > 0).then(|| correct as f64 / images as f64),
        warnings: evaluation.warnings.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predominant_truth_prefers_earliest_on_ties() {
        let mut study = StudyRecord::new("1");
        let mut series = SeriesRecord::new("1.1", Modality::Ct);
        for (i, _) in ["a", "b", "c", "d"].iter().enumerate() {
            series.images.push(ImageRecord::new(format!("im{i}"), String::new()));
        }
        study.series.push(series);
        let truth: HashMap<String, BodyRegion> = [
            ("im0", BodyRegion::Neck),
            ("im1", BodyRegion::Head),
            ("im2", BodyRegion::Neck),
            ("im3", BodyRegion::Head),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        assert_eq!(predominant_truth(&study, &truth), Some(BodyRegion::Head));
        assert_eq!(predominant_truth(&study, &HashMap::new()), None);
    }
}
