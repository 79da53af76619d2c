//! `htreg train`: load data, run every seed, write per-run and summary files.

use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use thiserror::Error;

use crate::data::{load_cifar10_binary, load_idx, save_checkpoint, synth_blobs, ChannelStats, DataError, Dataset};
use crate::nn::{evaluate, train, TrainError};

use super::config::{ConfigError, DatasetConfig, ExperimentConfig};
use super::report::{metrics_csv, summary_csv, RunSummary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Configuration problems are usage errors; everything else is a runtime failure.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Mismatch(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunSummary>,
    pub run_paths: Vec<RunPaths>,
    pub summary_path: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{suffix}"),
    };
    path.with_file_name(name)
}

pub fn run_paths(cfg: &ExperimentConfig, seed: u64) -> RunPaths {
    let tag = format!("seed{seed}");
    RunPaths {
        metrics: with_suffix(&cfg.output.metrics_csv, &tag),
        checkpoint: cfg.output.checkpoint_path.as_deref().map(|p| with_suffix(p, &tag)),
    }
}

pub fn summary_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.summary_csv.clone().unwrap_or_else(|| {
        let m = &cfg.output.metrics_csv;
        let stem = m.file_stem().unwrap_or_default().to_string_lossy();
        m.with_file_name(format!("{stem}.summary.csv"))
    })
}

fn subset(data: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => data.head(n),
        None => data,
    }
}

fn harmonise(train: Dataset, test: Dataset, standardize: bool, channels: usize) -> Result<(Dataset, Dataset), DataError> {
    let classes = train.classes().max(test.classes());
    let mut train = train.with_classes(classes)?;
    let mut test = test.with_classes(classes)?;
    if standardize {
        let stats = ChannelStats::fit(&train, channels)?;
        train.standardize(&stats);
        test.standardize(&stats);
    }
    Ok((train, test))
}

/// Loads (train, test) and checks them against the model's input and output widths.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), ExperimentError> {
    let (train_set, test_set) = match &cfg.dataset {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_subset,
            test_subset,
            standardize,
        } => harmonise(
            subset(load_idx(train_images, train_labels)?, *train_subset),
            subset(load_idx(test_images, test_labels)?, *test_subset),
            *standardize,
            1,
        )?,
        DatasetConfig::Cifar10 {
            train_files,
            test_files,
            train_subset,
            test_subset,
            standardize,
        } => harmonise(
            subset(load_cifar10_binary(train_files)?, *train_subset),
            subset(load_cifar10_binary(test_files)?, *test_subset),
            *standardize,
            3,
        )?,
        DatasetConfig::Blobs {
            classes,
            dim,
            n_per_class,
            test_per_class,
            separation,
            seed,
        } => {
            let all = synth_blobs(*classes, *dim, n_per_class + test_per_class, *separation, *seed)?;
            let n_train = classes * n_per_class;
            let train_set = all.head(n_train);
            let test_set = all.select(&(n_train..all.len()).collect::<Vec<_>>());
            (train_set, test_set)
        }
    };
    let sizes = &cfg.model.layer_sizes;
    let (input, output) = (sizes[0], *sizes.last().unwrap());
    if train_set.dim() != input {
        return Err(ExperimentError::Mismatch(format!(
            "{} has {} features per sample but model.layer_sizes starts with {input}",
            train_set.name,
            train_set.dim()
        )));
    }
    if train_set.classes() > output {
        return Err(ExperimentError::Mismatch(format!(
            "{} has {} classes but model.layer_sizes ends with {output}",
            train_set.name,
            train_set.classes()
        )));
    }
    Ok((train_set, test_set))
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn run_one(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(RunSummary, crate::nn::TrainOutcome), ExperimentError> {
    let tc = cfg.train_config(seed);
    info!("seed {seed}: training with penalty {}", tc.penalty.kind);
    let outcome = train(&tc, train_set, test_set)?;
    let last = outcome.metrics.last().expect("final epoch is always recorded");
    let (_, train_acc) = evaluate(&outcome.model, train_set)?;
    let alphas: Vec<f64> = last.layers.iter().filter_map(|l| l.alpha_hat).collect();
    let mean_alpha_hat = if alphas.len() == last.layers.len() {
        alphas.iter().sum::<f64>() / alphas.len() as f64
    } else {
        f64::NAN
    };
    let summary = RunSummary {
        seed,
        final_epoch: last.epoch,
        test_acc: last.test_accuracy,
        test_loss: last.test_loss,
        train_acc,
        weighted_alpha_total: last.weighted_alpha_total,
        mean_alpha_hat,
    };
    Ok((summary, outcome))
}

fn write_run(
    cfg: &ExperimentConfig,
    summary: &RunSummary,
    outcome: &crate::nn::TrainOutcome,
) -> Result<RunPaths, ExperimentError> {
    let paths = run_paths(cfg, summary.seed);
    write(&paths.metrics, &metrics_csv(&outcome.metrics))?;
    if let Some(ckpt) = &paths.checkpoint {
        let meta = json!({
            "name": cfg.name,
            "seed": summary.seed,
            "layer_sizes": cfg.model.layer_sizes,
            "penalty": cfg.penalty,
            "final_epoch": summary.final_epoch,
            "test_acc": summary.test_acc,
            "test_loss": summary.test_loss,
            "train_acc": summary.train_acc,
        });
        save_checkpoint(&outcome.model, Some(&meta), ckpt)?;
    }
    info!(
        "seed {} done: test acc {:.2}% train acc {:.2}% -> {}",
        summary.seed,
        summary.test_acc,
        summary.train_acc,
        paths.metrics.display()
    );
    Ok(paths)
}

/// Runs `repeats` seeds, up to `jobs` at a time; each run is single-threaded
/// so the outputs do not depend on `jobs`. Nothing is written until the
/// config and data have been validated.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome, ExperimentError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(ConfigError::Invalid(errs).into());
    }
    let (train_set, test_set) = load_datasets(cfg)?;
    info!(
        "{}: {} train / {} test samples, {} features, {} classes",
        train_set.name,
        train_set.len(),
        test_set.len(),
        train_set.dim(),
        train_set.classes()
    );

    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|r| cfg.train.seed + r).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut run_paths_all = Vec::with_capacity(seeds.len());
    for group in seeds.chunks(jobs.max(1)) {
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| {
                    let (train_set, test_set) = (&train_set, &test_set);
                    scope.spawn(move || run_one(cfg, seed, train_set, test_set))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for result in results {
            let (summary, outcome) = result?;
            run_paths_all.push(write_run(cfg, &summary, &outcome)?);
            runs.push(summary);
        }
    }
    let summary_path = summary_path(cfg);
    write(&summary_path, &summary_csv(&runs))?;
    Ok(ExperimentOutcome {
        runs,
        run_paths: run_paths_all,
        summary_path,
    })
}
