//! Datasets, loaders and batching.

mod checkpoint;
mod cifar;
mod idx;

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, metadata_path, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{load_cifar10_binary, parse_cifar10, CIFAR_IMAGE_BYTES, CIFAR_RECORD_BYTES};
pub use idx::{
    idx_dataset, load_idx, parse_idx_images, parse_idx_labels, IdxImages, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} of sample {index} out of range (classes = {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("feature buffer has {actual} values, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// Labelled feature matrix, rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::InvalidArgument("feature width must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::ShapeMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given samples into a `batch x dim` matrix plus labels.
    pub fn batch(&self, indices: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let x = DMatrix::from_fn(indices.len(), self.dim, |r, c| {
            self.features[indices[r] * self.dim + c]
        });
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// First `n` samples (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            features: self.features[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            name: self.name.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self, DataError> {
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        self.classes = classes;
        Ok(self)
    }

    /// Subtracts per-channel means and divides by per-channel standard
    /// deviations. Features are laid out as `channels` contiguous planes.
    pub fn standardize(&mut self, stats: &ChannelStats) {
        let plane = self.dim / stats.mean.len();
        for row in self.features.chunks_mut(self.dim) {
            for (c, chunk) in row.chunks_mut(plane).enumerate() {
                let (m, s) = (stats.mean[c], stats.std[c]);
                for v in chunk {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Per-channel moments used for optional standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(data: &Dataset, channels: usize) -> Result<ChannelStats, DataError> {
        if channels == 0 || data.dim % channels != 0 {
            return Err(DataError::InvalidArgument(format!(
                "cannot split {} features into {channels} channels",
                data.dim
            )));
        }
        if data.is_empty() {
            return Err(DataError::Empty);
        }
        let plane = data.dim / channels;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for row in data.features.chunks(data.dim) {
            for (c, chunk) in row.chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

/// Gaussian blobs: class `c` is centred at `separation * e_{c mod dim}` with
/// unit-variance noise, then the whole set is affinely mapped into `[0, 1]`.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || dim < 1 || n_per_class < 1 {
        return Err(DataError::InvalidArgument(format!(
            "blobs need classes >= 2, dim >= 1, n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !separation.is_finite() {
        return Err(DataError::InvalidArgument("separation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for c in 0..classes {
            for j in 0..dim {
                let centre = if j == c % dim { separation } else { 0.0 };
                features.push(centre + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    let lo = features.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = features.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut features {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
    Dataset::new(format!("blobs-{classes}x{dim}"), features, labels, dim, classes)
}

/// Seeded permutation of `0..n` cut into consecutive batches; the last may be short.
pub fn batch_iter(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_sizes() {
        let b = batch_iter(5, 2, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(batch_iter(5, 2, 1), b);
        assert_ne!(batch_iter(50, 50, 1), batch_iter(50, 50, 2));
        assert!(batch_iter(0, 3, 0).is_empty());
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 0usize..300, bs in 1usize..64, seed in any::<u64>()) {
            let mut all: Vec<usize> = batch_iter(n, bs, seed).into_iter().flatten().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn blobs_are_balanced_deterministic_and_bounded() {
        let d = synth_blobs(3, 4, 50, 4.0, 7).unwrap();
        assert_eq!(d.len(), 150);
        for c in 0..3 {
            assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 50);
        }
        assert!(d.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d, synth_blobs(3, 4, 50, 4.0, 7).unwrap());
        assert_ne!(d, synth_blobs(3, 4, 50, 4.0, 8).unwrap());
        assert!(synth_blobs(1, 4, 50, 4.0, 7).is_err());
    }

    #[test]
    fn blobs_nearest_centre_classifier() {
        // centres map through the same affine rescaling, so nearest-centre
        // (the Bayes rule for equal isotropic Gaussians) stays valid
        let d = synth_blobs(2, 2, 2000, 4.0, 11).unwrap();
        let mut centres = vec![vec![0.0; 2]; 2];
        for i in 0..d.len() {
            for j in 0..2 {
                centres[d.labels()[i]][j] += d.row(i)[j] / 2000.0;
            }
        }
        let correct = (0..d.len())
            .filter(|&i| {
                let dist = |c: &Vec<f64>| c.iter().zip(d.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let pred = if dist(&centres[0]) <= dist(&centres[1]) { 0 } else { 1 };
                pred == d.labels()[i]
            })
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::new("x", vec![0.0; 3], vec![0, 1], 2, 2),
            Err(DataError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new("x", vec![0.0; 4], vec![0, 2], 2, 2),
            Err(DataError::LabelOutOfRange { index: 1, label: 2, .. })
        ));
    }

    #[test]
    fn standardize_channels() {
        let mut d = Dataset::new("x", vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0], vec![0, 1, 0], 2, 2).unwrap();
        let stats = ChannelStats::fit(&d, 2).unwrap();
        assert_eq!(stats.mean, vec![0.5, 0.5]);
        d.standardize(&stats);
        let mean0: f64 = (0..3).map(|i| d.row(i)[0]).sum::<f64>() / 3.0;
        let var0: f64 = (0..3).map(|i| d.row(i)[0].powi(2)).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-15 && (var0 - 1.0).abs() < 1e-12);
        assert!(ChannelStats::fit(&d, 3).is_err());
    }
}
