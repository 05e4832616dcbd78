//! Pipeline configuration: TOML file, command-line overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::FilterConfig;
use crate::postprocess::{PostprocessConfig, UncertaintyMetric};
use crate::stats::bootstrap::BootstrapConfig;
use crate::stats::FactorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Nearest-centroid model trained on the train split.
    Centroid,
    /// Precomputed probabilities from a CSV file.
    Scores,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "centroid" => Ok(BackendKind::Centroid),
            "scores" => Ok(BackendKind::Scores),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub backend: BackendKind,
    pub scores: Option<PathBuf>,
    pub batch_size: usize,
    /// Share of studies per region used for training the centroid model.
    pub train_ratio: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            backend: BackendKind::Centroid,
            scores: None,
            batch_size: 32,
            train_ratio: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub resamples: usize,
    pub level: f64,
    pub step_mm: f64,
    /// Categories and regions with fewer members report "NA".
    pub min_count: usize,
    /// Replaces the bundled BodyPartExamined synonym map.
    pub synonyms: Option<PathBuf>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        EvaluationConfig {
            resamples: b.resamples,
            level: b.level,
            step_mm: b.step_mm,
            min_count: FactorConfig::default().min_count,
            synonyms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub filter: FilterConfig,
    pub classify: ClassifyConfig,
    pub postprocess: PostprocessConfig,
    pub evaluation: EvaluationConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub scores: Option<PathBuf>,
    pub metric: Option<UncertaintyMetric>,
    pub threshold: Option<f64>,
    pub step_mm: Option<f64>,
    pub resamples: Option<usize>,
    pub level: Option<f64>,
    pub strict_geometry: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{field} = {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: String,
        range: &'static str,
    },
    #[error("backend \"scores\" needs a scores file")]
    MissingScores,
}

fn check(ok: bool, field: &'static str, value: impl ToString, range: &'static str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            field,
            value: value.to_string(),
            range,
        })
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads `path` if given, applies `overrides`, then validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.backend {
            self.classify.backend = v;
        }
        if let Some(v) = &o.scores {
            self.classify.scores = Some(v.clone());
        }
        if let Some(v) = o.metric {
            self.postprocess.metric = v;
        }
        if let Some(v) = o.threshold {
            self.postprocess.threshold = v;
        }
        if let Some(v) = o.step_mm {
            self.evaluation.step_mm = v;
        }
        if let Some(v) = o.resamples {
            self.evaluation.resamples = v;
        }
        if let Some(v) = o.level {
            self.evaluation.level = v;
        }
        if o.strict_geometry {
            self.filter.strict_geometry = true;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.filter;
        check((0.0..=90.0).contains(&f.max_axial_angle_deg), "filter.max_axial_angle_deg", f.max_axial_angle_deg, "[0, 90]")?;
        check(f.max_excluded_bits <= 32, "filter.max_excluded_bits", f.max_excluded_bits, "[0, 32]")?;
        let p = &self.postprocess;
        let max_threshold = match p.metric {
            UncertaintyMetric::Margin => 1.0,
            UncertaintyMetric::Entropy => f64::INFINITY,
        };
        check(p.threshold >= 0.0 && p.threshold <= max_threshold, "postprocess.threshold", p.threshold, "[0, 1] for margin, [0, inf) for entropy")?;
        check(p.window >= 1 && p.window % 2 == 1, "postprocess.window", p.window, "odd values >= 1")?;
        check(p.min_run >= 1, "postprocess.min_run", p.min_run, "[1, inf)")?;
        check(p.breast_fraction > 0.0 && p.breast_fraction <= 1.0, "postprocess.breast_fraction", p.breast_fraction, "(0, 1]")?;
        let c = &self.classify;
        check(c.batch_size >= 1, "classify.batch_size", c.batch_size, "[1, inf)")?;
        check(c.train_ratio > 0.0 && c.train_ratio < 1.0, "classify.train_ratio", c.train_ratio, "(0, 1)")?;
        if c.backend == BackendKind::Scores && c.scores.is_none() {
            return Err(ConfigError::MissingScores);
        }
        let e = &self.evaluation;
        check(e.resamples >= 1, "evaluation.resamples", e.resamples, "[1, inf)")?;
        check(e.level > 0.0 && e.level < 1.0, "evaluation.level", e.level, "(0, 1)")?;
        check(e.step_mm > 0.0 && e.step_mm.is_finite(), "evaluation.step_mm", e.step_mm, "(0, inf)")?;
        check(e.min_count >= 1, "evaluation.min_count", e.min_count, "[1, inf)")?;
        Ok(())
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.evaluation.resamples,
            level: self.evaluation.level,
            step_mm: self.evaluation.step_mm,
            seed: self.seed,
        }
    }

    pub fn factors(&self) -> FactorConfig {
        FactorConfig {
            min_count: self.evaluation.min_count,
        }
    }
}
