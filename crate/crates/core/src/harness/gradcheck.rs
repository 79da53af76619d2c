//! Finite-difference verification of every analytic gradient in the crate.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{derive_seed, init_mlp, loss_and_grads};
use crate::penalty::{
    penalty_gradient_frozen, penalty_value_frozen, spectrum_alpha, PenaltyKind, PenaltySpec,
};
use crate::spectral::{gram_spectrum, WeightMatrix};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const PENALTY_STEP: f64 = 1e-5;
const BACKPROP_STEP: f64 = 1e-6;
const SHAPES: [(usize, usize); 2] = [(12, 12), (20, 30)];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    /// Penalty kind name, or `backprop`.
    pub check: String,
    pub shape: String,
    pub max_rel_err: f64,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck seed={} tolerance={:e}", self.seed, GRADCHECK_TOLERANCE)?;
        writeln!(f, "{:<16} {:>8} {:>14}  status", "check", "shape", "max_rel_err")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<16} {:>8} {:>14.3e}  {}",
                e.check,
                e.shape,
                e.max_rel_err,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `max |a - b| / max |b|`; NaN-safe (any NaN counts as a failure).
pub fn max_rel_err(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax();
    let diff = (analytic - reference).amax();
    if analytic.iter().chain(reference.iter()).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        return diff;
    }
    diff / scale
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightMatrix::from_matrix(DMatrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    }))
}

/// Runs the full suite. `corrupt` names one check (a penalty kind or
/// `backprop`) whose analytic gradient is deliberately perturbed.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> GradcheckReport {
    let mut entries = Vec::new();
    for (i, &(rows, cols)) in SHAPES.iter().enumerate() {
        let w = gaussian_matrix(rows, cols, derive_seed(seed, i as u64));
        entries.extend(check_penalties(&w, corrupt));
    }
    entries.push(check_backprop(derive_seed(seed, 99), corrupt == Some("backprop")));
    GradcheckReport { seed, entries }
}

fn check_penalties(w: &WeightMatrix, corrupt: Option<&str>) -> Vec<GradcheckEntry> {
    let shape = format!("{}x{}", w.rows(), w.cols());
    let base = match gram_spectrum(w) {
        Ok(s) => s,
        Err(_) => {
            return PenaltyKind::ACTIVE
                .iter()
                .map(|k| GradcheckEntry {
                    check: k.name().into(),
                    shape: shape.clone(),
                    max_rel_err: f64::INFINITY,
                })
                .collect()
        }
    };
    let specs: Vec<PenaltySpec> = PenaltyKind::ACTIVE.iter().map(|&k| PenaltySpec::new(k, 1.0)).collect();
    let alphas: Vec<Option<f64>> = specs
        .iter()
        .map(|s| s.kind.uses_tail_index().then(|| spectrum_alpha(&base, s.hill_k).unwrap_or(f64::NAN)))
        .collect();
    let mut fd = vec![DMatrix::zeros(w.rows(), w.cols()); specs.len()];
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let mut plus = w.clone();
            plus.as_matrix_mut()[(r, c)] += PENALTY_STEP;
            let mut minus = w.clone();
            minus.as_matrix_mut()[(r, c)] -= PENALTY_STEP;
            let (sp, sm) = match (gram_spectrum(&plus), gram_spectrum(&minus)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => {
                    fd.iter_mut().for_each(|m| m[(r, c)] = f64::NAN);
                    continue;
                }
            };
            for (k, spec) in specs.iter().enumerate() {
                let fp = penalty_value_frozen(&plus, Some(&sp), spec, alphas[k]).unwrap_or(f64::NAN);
                let fm = penalty_value_frozen(&minus, Some(&sm), spec, alphas[k]).unwrap_or(f64::NAN);
                fd[k][(r, c)] = (fp - fm) / (2.0 * PENALTY_STEP);
            }
        }
    }
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let max_rel_err = match penalty_gradient_frozen(w, Some(&base), spec, alphas[k]) {
                Ok(g) => {
                    let mut g = g.into_inner();
                    if corrupt == Some(spec.kind.name()) {
                        g *= 1.01;
                    }
                    max_rel_err(&g, &fd[k])
                }
                Err(_) => f64::INFINITY,
            };
            GradcheckEntry {
                check: spec.kind.name().into(),
                shape: shape.clone(),
                max_rel_err,
            }
        })
        .collect()
}

fn check_backprop(seed: u64, corrupt: bool) -> GradcheckEntry {
    let sizes = [4, 3, 2];
    let mut model = init_mlp(&sizes, seed).expect("valid sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    for b in model.biases.iter_mut().flatten() {
        *b = rng.random_range(-0.2..0.2);
    }
    let x = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..2)).collect();
    let loss = |m: &crate::nn::MlpModel| loss_and_grads(m, &x, &y).map(|r| r.0).unwrap_or(f64::NAN);
    let (_, grads) = loss_and_grads(&model, &x, &y).expect("shapes match");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for l in 0..model.num_layers() {
        let (rows, cols) = model.weights[l].shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.weights[l].get(i, j);
                model.weights[l].as_matrix_mut()[(i, j)] = orig + BACKPROP_STEP;
                let lp = loss(&model);
                model.weights[l].as_matrix_mut()[(i, j)] = orig - BACKPROP_STEP;
                let lm = loss(&model);
                model.weights[l].as_matrix_mut()[(i, j)] = orig;
                numeric.push((lp - lm) / (2.0 * BACKPROP_STEP));
                analytic.push(grads.weights[l][(i, j)]);
            }
        }
        for j in 0..cols {
            let orig = model.biases[l][j];
            model.biases[l][j] = orig + BACKPROP_STEP;
            let lp = loss(&model);
            model.biases[l][j] = orig - BACKPROP_STEP;
            let lm = loss(&model);
            model.biases[l][j] = orig;
            numeric.push((lp - lm) / (2.0 * BACKPROP_STEP));
            analytic.push(grads.biases[l][j]);
        }
    }
    let mut a = DMatrix::from_column_slice(analytic.len(), 1, &analytic);
    if corrupt {
        a *= 1.01;
    }
    let n = DMatrix::from_column_slice(numeric.len(), 1, &numeric);
    GradcheckEntry {
        check: "backprop".into(),
        shape: "4-3-2".into(),
        max_rel_err: max_rel_err(&a, &n),
    }
}
