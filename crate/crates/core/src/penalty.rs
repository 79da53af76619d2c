//! Penalty functions on layer weight matrices.
//!
//! Two conventional baselines (weight decay, spectral norm) sit next to the
//! four heavy-tailed penalties (weighted alpha, stable rank, power-law prior,
//! Fréchet prior). All values are per-layer `p_l(W_l)` before the coefficient.
//!
//! The tail index `alpha_hat` entering the heavy-tailed penalties is
//! re-estimated from the current spectrum but held constant when
//! differentiating, so gradients only flow through the eigenvalues.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{
    eigenvalue_gradient, gram_spectrum, positive_spectrum, SpectralError, Spectrum, WeightMatrix,
    DEFAULT_POSITIVE_TOL,
};
use crate::tail::{hill_estimator, HillK, TailError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error(transparent)]
    Tail(#[from] TailError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("only {0} positive eigenvalues; heavy-tailed penalties need at least 2")]
    SpectrumTooSmall(usize),
}

impl PenaltyError {
    pub fn is_degenerate_eigenvalue(&self) -> bool {
        matches!(
            self,
            PenaltyError::Spectral(SpectralError::DegenerateEigenvalue { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    #[default]
    None,
    WeightDecay,
    SpectralNorm,
    WeightedAlpha,
    StableRank,
    PowerLawPrior,
    FrechetPrior,
}

impl PenaltyKind {
    /// Every kind that contributes a penalty term.
    pub const ACTIVE: [PenaltyKind; 6] = [
        PenaltyKind::WeightDecay,
        PenaltyKind::SpectralNorm,
        PenaltyKind::WeightedAlpha,
        PenaltyKind::StableRank,
        PenaltyKind::PowerLawPrior,
        PenaltyKind::FrechetPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::WeightDecay => "weight_decay",
            PenaltyKind::SpectralNorm => "spectral_norm",
            PenaltyKind::WeightedAlpha => "weighted_alpha",
            PenaltyKind::StableRank => "stable_rank",
            PenaltyKind::PowerLawPrior => "power_law_prior",
            PenaltyKind::FrechetPrior => "frechet_prior",
        }
    }

    pub fn needs_spectrum(self) -> bool {
        !matches!(self, PenaltyKind::None | PenaltyKind::WeightDecay)
    }

    pub fn uses_tail_index(self) -> bool {
        matches!(
            self,
            PenaltyKind::WeightedAlpha | PenaltyKind::PowerLawPrior | PenaltyKind::FrechetPrior
        )
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        std::iter::once(PenaltyKind::None)
            .chain(PenaltyKind::ACTIVE)
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown penalty kind {s:?}"))
    }
}

/// Epoch-dependent multiplier or gate applied on top of the coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", from = "ScheduleRepr")]
pub enum Schedule {
    #[default]
    Always,
    /// `x^{-k}` on decay window `x`, zero once it drops to `t` or below.
    PowerDecay { k: f64, t: f64, m: u32 },
    /// `exp(-k x)` on decay window `x`, zero once it drops to `t` or below.
    ExpDecay { k: f64, t: f64, m: u32 },
    /// Penalty active only while the summed layer values stay at or above `t`.
    LowerThreshold { t: f64 },
}

// Unit variants ignore `deny_unknown_fields`, so `always` is parsed as an empty struct.
#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ScheduleRepr {
    Always {},
    PowerDecay {
        k: f64,
        #[serde(default)]
        t: f64,
        #[serde(default = "default_decay_window")]
        m: u32,
    },
    ExpDecay {
        k: f64,
        #[serde(default)]
        t: f64,
        #[serde(default = "default_decay_window")]
        m: u32,
    },
    LowerThreshold {
        t: f64,
    },
}

impl From<ScheduleRepr> for Schedule {
    fn from(r: ScheduleRepr) -> Self {
        match r {
            ScheduleRepr::Always {} => Schedule::Always,
            ScheduleRepr::PowerDecay { k, t, m } => Schedule::PowerDecay { k, t, m },
            ScheduleRepr::ExpDecay { k, t, m } => Schedule::ExpDecay { k, t, m },
            ScheduleRepr::LowerThreshold { t } => Schedule::LowerThreshold { t },
        }
    }
}

fn default_decay_window() -> u32 {
    10
}

fn default_k_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    #[serde(default)]
    pub kind: PenaltyKind,
    #[serde(default)]
    pub coefficient: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Fraction of `min(rows, cols)` used as the power-law prior cut `K`.
    #[serde(default = "default_k_fraction")]
    pub k_fraction: f64,
    #[serde(default)]
    pub hill_k: HillK,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec {
            kind: PenaltyKind::None,
            coefficient: 0.0,
            schedule: Schedule::Always,
            k_fraction: default_k_fraction(),
            hill_k: HillK::Auto,
        }
    }
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, coefficient: f64) -> Self {
        PenaltySpec {
            kind,
            coefficient,
            ..Default::default()
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// `false` when the penalty can never change an update.
    pub fn is_active(&self) -> bool {
        self.kind != PenaltyKind::None && self.coefficient != 0.0
    }

    /// Field-level validation; each entry is `(field, message)`.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        let mut push = |f: &str, m: String| errs.push((f.to_string(), m));
        if !(self.coefficient >= 0.0) || !self.coefficient.is_finite() {
            push("coefficient", format!("must be a finite value >= 0, got {}", self.coefficient));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            push("k_fraction", format!("must lie in (0, 1], got {}", self.k_fraction));
        }
        match self.schedule {
            Schedule::Always => {}
            Schedule::PowerDecay { k, t, m } | Schedule::ExpDecay { k, t, m } => {
                if !(k > 0.0) || !k.is_finite() {
                    push("schedule.k", format!("must be > 0, got {k}"));
                }
                if !(t >= 0.0) || !t.is_finite() {
                    push("schedule.t", format!("must be >= 0, got {t}"));
                }
                if m == 0 {
                    push("schedule.m", "must be a positive number of epochs".into());
                }
            }
            Schedule::LowerThreshold { t } => {
                if t.is_nan() {
                    push("schedule.t", "must be a number".into());
                }
                if !matches!(self.kind, PenaltyKind::WeightedAlpha | PenaltyKind::StableRank) {
                    push(
                        "schedule",
                        format!("lower_threshold only applies to weighted_alpha and stable_rank, not {}", self.kind),
                    );
                }
            }
        }
        errs
    }
}

/// Decay multiplier for a 1-indexed epoch; window index `x = (epoch-1)/m + 1`.
pub fn schedule_factor(schedule: &Schedule, epoch: usize) -> f64 {
    let window = |m: u32| ((epoch.max(1) - 1) / m.max(1) as usize + 1) as f64;
    match *schedule {
        Schedule::Always | Schedule::LowerThreshold { .. } => 1.0,
        Schedule::PowerDecay { k, t, m } => {
            let d = window(m).powf(-k);
            if d > t {
                d
            } else {
                0.0
            }
        }
        Schedule::ExpDecay { k, t, m } => {
            let d = (-k * window(m)).exp();
            if d > t {
                d
            } else {
                0.0
            }
        }
    }
}

/// Lower-threshold gate: `Σ layer_values >= t`. Always open for other schedules.
pub fn threshold_gate(spec: &PenaltySpec, layer_values: &[f64]) -> bool {
    match spec.schedule {
        Schedule::LowerThreshold { t } => layer_values.iter().sum::<f64>() >= t,
        _ => true,
    }
}

/// Hill estimate on the positive part of the spectrum.
pub fn spectrum_alpha(s: &Spectrum, hill_k: HillK) -> Result<f64, PenaltyError> {
    let positive = positive_spectrum(s, DEFAULT_POSITIVE_TOL);
    if positive.len() < 2 {
        return Err(PenaltyError::SpectrumTooSmall(positive.len()));
    }
    Ok(hill_estimator(&positive, hill_k)?.alpha_hat)
}

/// Number of leading eigenvalues entering the power-law prior.
pub fn power_law_cut(s: &Spectrum, w_shape: (usize, usize), k_fraction: f64) -> usize {
    let min_dim = w_shape.0.min(w_shape.1);
    let k = (k_fraction * min_dim as f64).ceil() as usize;
    let positive = positive_spectrum(s, DEFAULT_POSITIVE_TOL).len();
    k.clamp(1, positive.max(1))
}

/// Penalty value `p_l(W)` with `alpha_hat` estimated from `s`.
pub fn penalty_value(w: &WeightMatrix, s: &Spectrum, spec: &PenaltySpec) -> Result<f64, PenaltyError> {
    let alpha = layer_alpha(s, spec)?;
    penalty_value_frozen(w, Some(s), spec, alpha)
}

/// Gradient `∂p_l/∂W` with `alpha_hat` estimated from `s` and then held fixed.
pub fn penalty_gradient(
    w: &WeightMatrix,
    s: &Spectrum,
    spec: &PenaltySpec,
) -> Result<WeightMatrix, PenaltyError> {
    let alpha = layer_alpha(s, spec)?;
    penalty_gradient_frozen(w, Some(s), spec, alpha)
}

fn layer_alpha(s: &Spectrum, spec: &PenaltySpec) -> Result<Option<f64>, PenaltyError> {
    if spec.kind.uses_tail_index() {
        spectrum_alpha(s, spec.hill_k).map(Some)
    } else {
        Ok(None)
    }
}

fn require<'a>(s: Option<&'a Spectrum>, w: &WeightMatrix) -> Result<std::borrow::Cow<'a, Spectrum>, PenaltyError> {
    match s {
        Some(s) => Ok(std::borrow::Cow::Borrowed(s)),
        None => Ok(std::borrow::Cow::Owned(gram_spectrum(w)?)),
    }
}

fn require_alpha(alpha: Option<f64>, s: &Spectrum, spec: &PenaltySpec) -> Result<f64, PenaltyError> {
    match alpha {
        Some(a) => Ok(a),
        None => spectrum_alpha(s, spec.hill_k),
    }
}

/// Penalty value with a caller-supplied `alpha_hat`.
///
/// `s` may be omitted, in which case it is computed when the kind needs it;
/// `alpha` is estimated from the spectrum when omitted.
pub fn penalty_value_frozen(
    w: &WeightMatrix,
    s: Option<&Spectrum>,
    spec: &PenaltySpec,
    alpha: Option<f64>,
) -> Result<f64, PenaltyError> {
    let kind = spec.kind;
    match kind {
        PenaltyKind::None => return Ok(0.0),
        PenaltyKind::WeightDecay => return Ok(0.5 * w.frobenius_sq()),
        _ => {}
    }
    let s = require(s, w)?;
    if kind.uses_tail_index() {
        let positive = positive_spectrum(&s, DEFAULT_POSITIVE_TOL).len();
        if positive < 2 {
            return Err(PenaltyError::SpectrumTooSmall(positive));
        }
    }
    let value = match kind {
        PenaltyKind::SpectralNorm => 0.5 * s.lambda_max,
        PenaltyKind::StableRank => s.stable_rank()?,
        PenaltyKind::WeightedAlpha => require_alpha(alpha, &s, spec)? * s.lambda_max.ln(),
        PenaltyKind::PowerLawPrior => {
            let a = require_alpha(alpha, &s, spec)?;
            let cut = power_law_cut(&s, w.shape(), spec.k_fraction);
            a * s.eigenvalues[..cut].iter().map(|l| l.ln()).sum::<f64>()
        }
        PenaltyKind::FrechetPrior => {
            let a = require_alpha(alpha, &s, spec)?;
            s.lambda_max.powf(-a)
        }
        PenaltyKind::None | PenaltyKind::WeightDecay => unreachable!(),
    };
    Ok(value)
}

/// Gradient with a caller-supplied (detached) `alpha_hat`.
pub fn penalty_gradient_frozen(
    w: &WeightMatrix,
    s: Option<&Spectrum>,
    spec: &PenaltySpec,
    alpha: Option<f64>,
) -> Result<WeightMatrix, PenaltyError> {
    let kind = spec.kind;
    match kind {
        PenaltyKind::None => return Ok(WeightMatrix::zeros(w.rows(), w.cols())),
        PenaltyKind::WeightDecay => return Ok(w.clone()),
        _ => {}
    }
    let s = require(s, w)?;
    if kind.uses_tail_index() {
        let positive = positive_spectrum(&s, DEFAULT_POSITIVE_TOL).len();
        if positive < 2 {
            return Err(PenaltyError::SpectrumTooSmall(positive));
        }
    }
    let lmax = s.lambda_max;
    let grad = match kind {
        PenaltyKind::SpectralNorm => eigenvalue_gradient(w, &s, 0)?.into_inner() * 0.5,
        PenaltyKind::WeightedAlpha => {
            let a = require_alpha(alpha, &s, spec)?;
            eigenvalue_gradient(w, &s, 0)?.into_inner() * (a / lmax)
        }
        PenaltyKind::StableRank => {
            if lmax <= 0.0 {
                return Err(SpectralError::ZeroMatrix.into());
            }
            let top = eigenvalue_gradient(w, &s, 0)?.into_inner();
            w.as_matrix() * (2.0 / lmax) - top * (s.frobenius_sq / (lmax * lmax))
        }
        PenaltyKind::PowerLawPrior => {
            let a = require_alpha(alpha, &s, spec)?;
            let cut = power_law_cut(&s, w.shape(), spec.k_fraction);
            // Σ_j v_j v_jᵀ / λ_j over a cluster is basis-free; only the cut must be a real gap
            if !s.boundary_is_simple(cut) {
                return Err(SpectralError::DegenerateEigenvalue {
                    index: cut - 1,
                    gap: (s.eigenvalues[cut - 1] - s.eigenvalues[cut]) / lmax,
                }
                .into());
            }
            let v = s.right_vectors.columns(0, cut);
            let mut scaled = v.clone_owned();
            for j in 0..cut {
                let lambda = s.eigenvalues[j];
                scaled.column_mut(j).scale_mut(2.0 * a / lambda);
            }
            (w.as_matrix() * scaled) * v.transpose()
        }
        PenaltyKind::FrechetPrior => {
            let a = require_alpha(alpha, &s, spec)?;
            eigenvalue_gradient(w, &s, 0)?.into_inner() * (-a * lmax.powf(-a - 1.0))
        }
        PenaltyKind::None | PenaltyKind::WeightDecay => unreachable!(),
    };
    Ok(WeightMatrix::from_matrix(grad))
}

/// Per-layer diagnostics of one penalty evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPenaltyReport {
    pub layer: usize,
    pub value: f64,
    pub alpha_hat: Option<f64>,
    /// NaN when the kind does not need a spectrum.
    pub lambda_max: f64,
    pub stable_rank: f64,
    pub gate_active: bool,
}

/// Spectral quantities of one layer, cacheable across steps.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub spectrum: Option<Spectrum>,
    pub alpha: Option<Result<f64, PenaltyError>>,
}

impl LayerState {
    pub fn compute(w: &WeightMatrix, spec: &PenaltySpec) -> Result<LayerState, SpectralError> {
        if !spec.kind.needs_spectrum() {
            return Ok(LayerState {
                spectrum: None,
                alpha: None,
            });
        }
        let spectrum = gram_spectrum(w)?;
        let alpha = spec
            .kind
            .uses_tail_index()
            .then(|| spectrum_alpha(&spectrum, spec.hill_k));
        Ok(LayerState {
            spectrum: Some(spectrum),
            alpha,
        })
    }
}

/// Result of evaluating the penalty over all layers for one SGD step.
#[derive(Debug, Clone)]
pub struct PenaltyStep {
    pub reports: Vec<LayerPenaltyReport>,
    /// `None` for layers whose gradient was skipped.
    pub gradients: Vec<Option<DMatrix<f64>>>,
    pub factor: f64,
    pub gate: bool,
    /// `coefficient * factor` when the gate is open, else 0.
    pub scale: f64,
    /// `scale * Σ_l p_l`.
    pub total: f64,
}

impl PenaltyStep {
    /// `true` when the step changes the parameter update at all.
    pub fn is_effective(&self) -> bool {
        self.scale != 0.0 && self.gradients.iter().any(Option::is_some)
    }
}

/// Evaluates values, gate and (detached) gradients for every layer.
///
/// Layers with a degenerate tail or repeated eigenvalue contribute nothing
/// and are logged.
pub fn penalty_step(
    weights: &[WeightMatrix],
    states: &[LayerState],
    spec: &PenaltySpec,
    epoch: usize,
    with_gradients: bool,
) -> PenaltyStep {
    let factor = schedule_factor(&spec.schedule, epoch);
    let mut reports = Vec::with_capacity(weights.len());
    let mut alphas = Vec::with_capacity(weights.len());
    for (layer, (w, st)) in weights.iter().zip(states).enumerate() {
        let spectrum = st.spectrum.as_ref();
        let alpha = match &st.alpha {
            Some(Ok(a)) => Some(*a),
            Some(Err(e)) => {
                warn!("layer {layer}: {} skipped ({e})", spec.kind);
                alphas.push(None);
                reports.push(empty_report(layer, spectrum));
                continue;
            }
            None => None,
        };
        let value = match penalty_value_frozen(w, spectrum, spec, alpha) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                warn!("layer {layer}: non-finite {} value {v}, skipped", spec.kind);
                alphas.push(None);
                reports.push(empty_report(layer, spectrum));
                continue;
            }
            Err(e) => {
                warn!("layer {layer}: {} skipped ({e})", spec.kind);
                alphas.push(None);
                reports.push(empty_report(layer, spectrum));
                continue;
            }
        };
        alphas.push(Some(alpha));
        let mut report = empty_report(layer, spectrum);
        report.value = value;
        report.alpha_hat = alpha;
        report.gate_active = true;
        reports.push(report);
    }

    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let gate = factor > 0.0 && threshold_gate(spec, &values);
    let scale = if gate { spec.coefficient * factor } else { 0.0 };
    let mut gradients = vec![None; weights.len()];
    for r in &mut reports {
        r.gate_active &= gate;
    }
    if gate && with_gradients {
        for (layer, alpha) in alphas.iter().enumerate() {
            let Some(alpha) = alpha else { continue };
            match penalty_gradient_frozen(&weights[layer], states[layer].spectrum.as_ref(), spec, *alpha) {
                Ok(g) => gradients[layer] = Some(g.into_inner()),
                Err(e) => warn!("layer {layer}: {} gradient skipped ({e})", spec.kind),
            }
        }
    }
    let total = if gate { scale * values.iter().sum::<f64>() } else { 0.0 };
    PenaltyStep {
        reports,
        gradients,
        factor,
        gate,
        scale,
        total,
    }
}

fn empty_report(layer: usize, s: Option<&Spectrum>) -> LayerPenaltyReport {
    LayerPenaltyReport {
        layer,
        value: 0.0,
        alpha_hat: None,
        lambda_max: s.map_or(f64::NAN, |s| s.lambda_max),
        stable_rank: s.and_then(|s| s.stable_rank().ok()).unwrap_or(f64::NAN),
        gate_active: false,
    }
}
