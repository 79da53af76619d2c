//! Per-layer spectral report of a trained model.

use std::fmt::Write as _;

use crate::nn::MlpModel;
use crate::penalty::{spectrum_alpha, PenaltyError};
use crate::spectral::{gram_spectrum, SpectralError};
use crate::tail::{HillK, TailError};

use super::report::ANALYSIS_SCHEMA;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub lambda_max: f64,
    pub frobenius_sq: f64,
    pub stable_rank: f64,
    /// Hill estimate with `k = n/2`, or the reason it is unavailable.
    pub alpha_hat: Result<f64, &'static str>,
}

impl LayerAnalysis {
    pub fn weighted_alpha(&self) -> Option<f64> {
        self.alpha_hat.ok().map(|a| a * self.lambda_max.ln())
    }
}

pub fn analyze_model(model: &MlpModel) -> Result<Vec<LayerAnalysis>, SpectralError> {
    model
        .weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let s = gram_spectrum(w)?;
            let alpha_hat = spectrum_alpha(&s, HillK::Auto).map_err(|e| match e {
                PenaltyError::Tail(TailError::DegenerateTail { .. }) => "DegenerateTail",
                PenaltyError::SpectrumTooSmall(_) => "SpectrumTooSmall",
                _ => "Error",
            });
            Ok(LayerAnalysis {
                layer: l + 1,
                rows: w.rows(),
                cols: w.cols(),
                lambda_max: s.lambda_max,
                frobenius_sq: s.frobenius_sq,
                stable_rank: s.stable_rank().unwrap_or(f64::NAN),
                alpha_hat,
            })
        })
        .collect()
}

/// `Σ_l alpha_l ln lambda_max,l`, `None` if any layer lacks an estimate.
pub fn weighted_alpha_total(layers: &[LayerAnalysis]) -> Option<f64> {
    layers.iter().map(LayerAnalysis::weighted_alpha).sum()
}

pub fn analysis_csv(layers: &[LayerAnalysis]) -> String {
    let mut out = format!(
        "{ANALYSIS_SCHEMA}\nlayer,rows,cols,lambda_max,frobenius_sq,stable_rank,alpha_hat,weighted_alpha\n"
    );
    for l in layers {
        let (alpha, wa) = match l.alpha_hat {
            Ok(a) => (a.to_string(), l.weighted_alpha().unwrap().to_string()),
            Err(marker) => (marker.to_string(), marker.to_string()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{alpha},{wa}",
            l.layer, l.rows, l.cols, l.lambda_max, l.frobenius_sq, l.stable_rank
        )
        .unwrap();
    }
    let total = weighted_alpha_total(layers).map_or_else(|| "DegenerateTail".to_string(), |t| t.to_string());
    writeln!(out, "total,,,,,,,{total}").unwrap();
    out
}
