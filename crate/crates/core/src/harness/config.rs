//! JSON experiment configuration.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::TrainConfig;
use crate::penalty::PenaltySpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config:\n{}", .0.iter().map(|(f, m)| format!("  {f}: {m}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// MNIST-family IDX files (uncompressed).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
        #[serde(default)]
        standardize: bool,
    },
    /// CIFAR-10 binary batches.
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
        #[serde(default)]
        standardize: bool,
    },
    /// Gaussian blobs; train and test are drawn together and split per class.
    Blobs {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        test_per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
}

/// Optimiser settings; every field falls back to [`TrainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub spectral_refresh: usize,
    pub metrics_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_initial: d.lr_initial,
            lr_milestones: d.lr_milestones,
            lr_gamma: d.lr_gamma,
            momentum: d.momentum,
            seed: d.seed,
            spectral_refresh: d.spectral_refresh,
            metrics_interval: d.metrics_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-run files are written as `<stem>.seed<N>.csv`.
    pub metrics_csv: PathBuf,
    /// Per-run checkpoints are written as `<stem>.seed<N>.<ext>`.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Defaults to `<metrics stem>.summary.csv`.
    #[serde(default)]
    pub summary_csv: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub penalty: PenaltySpec,
    pub output: OutputConfig,
    /// Runs use seeds `train.seed, train.seed + 1, ...`.
    #[serde(default = "one")]
    pub repeats: usize,
}

/// Folds `.` and `name/..` pairs without touching the filesystem.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            _ => out.push(c),
        }
    }
    out
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let full = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            ConfigError::Parse {
                line: e.line(),
                column: e.column(),
                message: full.strip_suffix(&suffix).unwrap_or(&full).to_string(),
            }
        })?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            }
        };
        match &mut self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
                ..
            } => train_files.iter_mut().chain(test_files.iter_mut()).for_each(fix),
            DatasetConfig::Blobs { .. } => {}
        }
        fix(&mut self.output.metrics_csv);
        self.output.checkpoint_path.iter_mut().for_each(fix);
        self.output.summary_csv.iter_mut().for_each(fix);
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            layer_sizes: self.model.layer_sizes.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_milestones: t.lr_milestones.clone(),
            lr_gamma: t.lr_gamma,
            momentum: t.momentum,
            seed,
            penalty: self.penalty,
            spectral_refresh: t.spectral_refresh,
            metrics_interval: t.metrics_interval,
        }
    }

    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs: Vec<(String, String)> = self
            .train_config(self.train.seed)
            .validate()
            .into_iter()
            .map(|(f, m)| {
                let f = if f == "layer_sizes" {
                    "model.layer_sizes".to_string()
                } else if f.starts_with("penalty.") {
                    f
                } else {
                    format!("train.{f}")
                };
                (f, m)
            })
            .collect();
        if self.repeats == 0 {
            errs.push(("repeats".into(), "must be positive".into()));
        }
        match &self.dataset {
            DatasetConfig::Idx {
                train_subset,
                test_subset,
                ..
            }
            | DatasetConfig::Cifar10 {
                train_subset,
                test_subset,
                ..
            } => {
                if *train_subset == Some(0) {
                    errs.push(("dataset.train_subset".into(), "must be positive".into()));
                }
                if *test_subset == Some(0) {
                    errs.push(("dataset.test_subset".into(), "must be positive".into()));
                }
                if let DatasetConfig::Cifar10 {
                    train_files,
                    test_files,
                    ..
                } = &self.dataset
                {
                    if train_files.is_empty() {
                        errs.push(("dataset.train_files".into(), "must not be empty".into()));
                    }
                    if test_files.is_empty() {
                        errs.push(("dataset.test_files".into(), "must not be empty".into()));
                    }
                }
            }
            DatasetConfig::Blobs {
                classes,
                dim,
                n_per_class,
                test_per_class,
                separation,
                ..
            } => {
                if *classes < 2 {
                    errs.push(("dataset.classes".into(), "must be >= 2".into()));
                }
                if *dim < 1 {
                    errs.push(("dataset.dim".into(), "must be >= 1".into()));
                }
                if *n_per_class < 1 {
                    errs.push(("dataset.n_per_class".into(), "must be >= 1".into()));
                }
                if *test_per_class < 1 {
                    errs.push(("dataset.test_per_class".into(), "must be >= 1".into()));
                }
                if !separation.is_finite() {
                    errs.push(("dataset.separation".into(), "must be finite".into()));
                }
                if let Some(&n0) = self.model.layer_sizes.first() {
                    if n0 != *dim {
                        errs.push((
                            "model.layer_sizes".into(),
                            format!("input width {n0} does not match dataset.dim {dim}"),
                        ));
                    }
                }
                if let Some(&out) = self.model.layer_sizes.last() {
                    if out < *classes {
                        errs.push((
                            "model.layer_sizes".into(),
                            format!("{out} outputs cannot represent {classes} classes"),
                        ));
                    }
                }
            }
        }
        if self.output.metrics_csv.as_os_str().is_empty() {
            errs.push(("output.metrics_csv".into(), "must not be empty".into()));
        }
        errs
    }
}
