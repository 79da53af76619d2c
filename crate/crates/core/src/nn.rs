//! A small fully-connected ReLU classifier trained with mini-batch SGD.
//!
//! Layer `l` maps a batch `A_{l-1}` (rows are samples) to
//! `Z_l = A_{l-1} W_l + b_l`; hidden layers apply ReLU and the output layer
//! feeds a softmax cross-entropy loss averaged over the batch. Penalties from
//! [`crate::penalty`] are added to the weight gradients only.

use log::{debug, info};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{batch_iter, Dataset};
use crate::penalty::{penalty_step, schedule_factor, LayerState, PenaltySpec, PenaltyStep};
use crate::spectral::{gram_spectrum, SpectralError, WeightMatrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameters in layer {layer} after update")]
    NonFiniteUpdate { layer: usize },
    #[error("invalid training config: {}", format_fields(.0))]
    InvalidConfig(Vec<(String, String)>),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn format_fields(errs: &[(String, String)]) -> String {
    errs.iter()
        .map(|(f, m)| format!("{f}: {m}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<WeightMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn from_parts(weights: Vec<WeightMatrix>, biases: Vec<Vec<f64>>) -> Result<Self, TrainError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_sizes = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *layer_sizes.last().unwrap() {
                return Err(TrainError::ShapeMismatch(format!(
                    "layer {l} has {} rows, previous layer has {} outputs",
                    w.rows(),
                    layer_sizes.last().unwrap()
                )));
            }
            if b.len() != w.cols() {
                return Err(TrainError::ShapeMismatch(format!(
                    "layer {l} bias has length {}, expected {}",
                    b.len(),
                    w.cols()
                )));
            }
            layer_sizes.push(w.cols());
        }
        Ok(MlpModel {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(WeightMatrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    fn check_batch(&self, x: &DMatrix<f64>, labels: &[usize]) -> Result<(), TrainError> {
        if x.ncols() != self.input_dim() {
            return Err(TrainError::ShapeMismatch(format!(
                "batch has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.nrows() != labels.len() || labels.is_empty() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.output_dim()) {
            return Err(TrainError::ShapeMismatch(format!(
                "label {bad} outside [0, {})",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Hidden activations (`acts[0]` is the input) and output logits.
    fn forward(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers());
        acts.push(x.clone());
        for l in 0..last {
            let mut z = affine(&acts[l], &self.weights[l], &self.biases[l]);
            z.apply(|v| *v = v.max(0.0));
            acts.push(z);
        }
        let logits = affine(&acts[last], &self.weights[last], &self.biases[last]);
        (acts, logits)
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).1
    }
}

fn affine(a: &DMatrix<f64>, w: &WeightMatrix, b: &[f64]) -> DMatrix<f64> {
    let mut z = a * w.as_matrix();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
    z
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Mean cross-entropy of the rows of `logits` against `labels`.
fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// He-style uniform initialisation on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, zero biases.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpModel, TrainError> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(TrainError::ShapeMismatch(format!(
            "need at least two positive layer sizes, got {layer_sizes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let values: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        weights.push(WeightMatrix::from_row_major(fan_in, fan_out, &values)?);
        biases.push(vec![0.0; fan_out]);
    }
    MlpModel::from_parts(weights, biases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Mean cross-entropy over the batch and its exact backpropagated gradients.
pub fn loss_and_grads(
    model: &MlpModel,
    x: &DMatrix<f64>,
    labels: &[usize],
) -> Result<(f64, Gradients), TrainError> {
    model.check_batch(x, labels)?;
    let (acts, logits) = model.forward(x);
    let loss = cross_entropy(&logits, labels);
    let batch = labels.len() as f64;

    let mut dz = softmax_rows(&logits);
    for (i, &y) in labels.iter().enumerate() {
        dz[(i, y)] -= 1.0;
    }
    dz /= batch;

    let n = model.num_layers();
    let mut gw = vec![DMatrix::zeros(0, 0); n];
    let mut gb = vec![Vec::new(); n];
    for l in (0..n).rev() {
        gw[l] = acts[l].transpose() * &dz;
        gb[l] = dz.row_sum().iter().copied().collect();
        if l > 0 {
            let mut da = &dz * model.weights[l].as_matrix().transpose();
            da.zip_apply(&acts[l], |d, a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            dz = da;
        }
    }
    Ok((loss, Gradients {
        weights: gw,
        biases: gb,
    }))
}

/// Momentum buffers, lazily allocated on the first step with `momentum > 0`.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<Vec<f64>>,
}

/// `W <- W - lr * (grad + scale * penalty_grad)`; biases are never penalised.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    penalty: Option<&PenaltyStep>,
    lr: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<(), TrainError> {
    let n = model.num_layers();
    if grads.weights.len() != n || grads.biases.len() != n {
        return Err(TrainError::ShapeMismatch("gradient layer count".into()));
    }
    let penalty = penalty.filter(|p| p.is_effective());
    if momentum > 0.0 && state.weights.is_empty() {
        state.weights = grads.weights.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
        state.biases = grads.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    }
    for l in 0..n {
        let w = model.weights[l].as_matrix_mut();
        if w.shape() != grads.weights[l].shape() {
            return Err(TrainError::ShapeMismatch(format!("layer {l} gradient shape")));
        }
        let mut g = grads.weights[l].clone();
        if let Some(pg) = penalty.and_then(|p| p.gradients[l].as_ref().map(|g| (p.scale, g))) {
            let scale = pg.0;
            g.zip_apply(pg.1, |a, b| *a += scale * b);
        }
        let b = &mut model.biases[l];
        if momentum > 0.0 {
            let buf = &mut state.weights[l];
            *buf *= momentum;
            *buf += &g;
            w.zip_apply(&*buf, |a, b| *a -= lr * b);
            for ((bv, gv), mv) in b.iter_mut().zip(&grads.biases[l]).zip(&mut state.biases[l]) {
                *mv = momentum * *mv + gv;
                *bv -= lr * *mv;
            }
        } else {
            w.zip_apply(&g, |a, b| *a -= lr * b);
            for (bv, gv) in b.iter_mut().zip(&grads.biases[l]) {
                *bv -= lr * gv;
            }
        }
        if !w.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFiniteUpdate { layer: l });
        }
    }
    Ok(())
}

/// Mean cross-entropy and top-1 accuracy (percent) over a dataset.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<(f64, f64), TrainError> {
    if data.dim() != model.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    if data.is_empty() {
        return Err(TrainError::ShapeMismatch("empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1024) {
        let (x, y) = data.batch(chunk);
        model.check_batch(&x, &y)?;
        let logits = model.logits(&x);
        loss += cross_entropy(&logits, &y) * y.len() as f64;
        for (i, &label) in y.iter().enumerate() {
            if logits.row(i).transpose().argmax().0 == label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// 1-indexed epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub penalty: PenaltySpec,
    /// Recompute spectra every this many SGD steps (1 = every step).
    pub spectral_refresh: usize,
    pub metrics_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_sizes: vec![784, 128, 128, 128, 10],
            epochs: 200,
            batch_size: 128,
            lr_initial: 0.05,
            lr_milestones: vec![100, 150],
            lr_gamma: 0.1,
            momentum: 0.0,
            seed: 0,
            penalty: PenaltySpec::default(),
            spectral_refresh: 1,
            metrics_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs: Vec<(String, String)> = Vec::new();
        let mut push = |f: &str, m: String| errs.push((f.to_string(), m));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            push("layer_sizes", format!("need >= 2 positive sizes, got {:?}", self.layer_sizes));
        }
        if self.epochs == 0 {
            push("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            push("batch_size", "must be positive".into());
        }
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            push("lr_initial", format!("must be > 0, got {}", self.lr_initial));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma < 1.0) {
            push("lr_gamma", format!("must lie in (0, 1), got {}", self.lr_gamma));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            push("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_milestones.windows(2).any(|p| p[0] >= p[1]) {
            push("lr_milestones", "must be strictly increasing".into());
        }
        if self.spectral_refresh == 0 {
            push("spectral_refresh", "must be positive".into());
        }
        if self.metrics_interval == 0 {
            push("metrics_interval", "must be positive".into());
        }
        for (f, m) in self.penalty.validate() {
            errs.push((format!("penalty.{f}"), m));
        }
        errs
    }

    /// Learning rate for a 1-indexed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| m < epoch).count();
        self.lr_initial * self.lr_gamma.powi(decays as i32)
    }
}

/// Per-layer spectral diagnostics of a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDiagnostics {
    pub alpha_hat: Option<f64>,
    pub lambda_max: f64,
    pub stable_rank: f64,
}

impl LayerDiagnostics {
    pub fn of(w: &WeightMatrix) -> Result<Self, SpectralError> {
        let s = gram_spectrum(w)?;
        Ok(LayerDiagnostics {
            alpha_hat: crate::penalty::spectrum_alpha(&s, crate::tail::HillK::Auto).ok(),
            lambda_max: s.lambda_max,
            stable_rank: s.stable_rank().unwrap_or(f64::NAN),
        })
    }

    pub fn weighted_alpha(&self) -> Option<f64> {
        self.alpha_hat.map(|a| a * self.lambda_max.ln())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub penalty_total: f64,
    /// `Σ_l alpha_l ln lambda_max,l`; NaN when some layer has no tail estimate.
    pub weighted_alpha_total: f64,
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub metrics: Vec<MetricsRow>,
}

/// Mixes a base seed with a stream index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset, which: &str) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::ShapeMismatch(format!("{which} set is empty")));
    }
    if data.dim() != cfg.layer_sizes[0] {
        return Err(TrainError::ShapeMismatch(format!(
            "{which} set has {} features, first layer expects {}",
            data.dim(),
            cfg.layer_sizes[0]
        )));
    }
    let out = *cfg.layer_sizes.last().unwrap();
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= out) {
        return Err(TrainError::ShapeMismatch(format!(
            "{which} set has label {bad} but the model has {out} outputs"
        )));
    }
    Ok(())
}

/// Trains from scratch; deterministic for a given config and datasets.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome, TrainError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(TrainError::InvalidConfig(errs));
    }
    check_dataset(cfg, train_set, "train")?;
    check_dataset(cfg, test_set, "test")?;

    let mut model = init_mlp(&cfg.layer_sizes, cfg.seed)?;
    let spec = &cfg.penalty;
    let mut momentum = MomentumState::default();
    let mut cache: Vec<LayerState> = Vec::new();
    let mut steps_since_refresh = 0usize;
    let mut metrics = Vec::new();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let penalize = spec.is_active() && schedule_factor(&spec.schedule, epoch) > 0.0;
        let mut loss_sum = 0.0;
        for batch in batch_iter(train_set.len(), cfg.batch_size, derive_seed(cfg.seed, epoch as u64)) {
            let (x, y) = train_set.batch(&batch);
            let (loss, grads) = loss_and_grads(&model, &x, &y)?;
            loss_sum += loss * batch.len() as f64;
            let step = if penalize {
                if cache.is_empty() || steps_since_refresh >= cfg.spectral_refresh {
                    cache = model
                        .weights
                        .iter()
                        .map(|w| LayerState::compute(w, spec))
                        .collect::<Result<_, _>>()?;
                    steps_since_refresh = 0;
                }
                steps_since_refresh += 1;
                Some(penalty_step(&model.weights, &cache, spec, epoch, true))
            } else {
                None
            };
            sgd_step(&mut model, &grads, step.as_ref(), lr, cfg.momentum, &mut momentum)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        debug!("epoch {epoch}: train loss {train_loss:.6}");

        if epoch % cfg.metrics_interval == 0 || epoch == cfg.epochs {
            let row = metrics_row(&model, cfg, epoch, train_loss, lr, test_set)?;
            info!(
                "epoch {epoch}: train loss {:.5} test loss {:.5} test acc {:.2}% weighted alpha {:.4}",
                row.train_loss, row.test_loss, row.test_accuracy, row.weighted_alpha_total
            );
            metrics.push(row);
        }
    }
    Ok(TrainOutcome { model, metrics })
}

fn metrics_row(
    model: &MlpModel,
    cfg: &TrainConfig,
    epoch: usize,
    train_loss: f64,
    lr: f64,
    test_set: &Dataset,
) -> Result<MetricsRow, TrainError> {
    let (test_loss, test_accuracy) = evaluate(model, test_set)?;
    let layers = model
        .weights
        .iter()
        .map(LayerDiagnostics::of)
        .collect::<Result<Vec<_>, _>>()?;
    let weighted_alpha_total = layers
        .iter()
        .map(|l| l.weighted_alpha().unwrap_or(f64::NAN))
        .sum();
    let penalty_total = if cfg.penalty.is_active() {
        let states = model
            .weights
            .iter()
            .map(|w| LayerState::compute(w, &cfg.penalty))
            .collect::<Result<Vec<_>, _>>()?;
        penalty_step(&model.weights, &states, &cfg.penalty, epoch, false).total
    } else {
        0.0
    };
    Ok(MetricsRow {
        epoch,
        train_loss,
        test_loss,
        test_accuracy,
        lr,
        penalty_total,
        weighted_alpha_total,
        layers,
    })
}
