//! Heavy-tailed spectral regularization for fully-connected networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`]: Gram-matrix eigensystems, stable rank and eigenvalue gradients.
//! * [`tail`]: Hill tail-index estimation and heavy-tailed samplers.
//! * [`penalty`]: the six penalty functions, their gradients and schedules.
//! * [`data`]: IDX / CIFAR-10 loaders, synthetic blobs, batching and checkpoints.
//! * [`nn`]: a small ReLU multilayer perceptron trained with mini-batch SGD.
//! * [`harness`]: experiment configs, CSV reporting, checkpoint analysis and
//!   the gradient-check suite backing the `htreg` command line tool.

pub mod data;
pub mod harness;
pub mod nn;
pub mod penalty;
pub mod spectral;
pub mod tail;

pub use data::{batch_iter, load_cifar10_binary, load_idx, synth_blobs, DataError, Dataset};
pub use nn::{evaluate, init_mlp, train, MetricsRow, MlpModel, TrainConfig, TrainError};
pub use penalty::{
    penalty_gradient, penalty_value, schedule_factor, threshold_gate, PenaltyError, PenaltyKind,
    PenaltySpec, Schedule,
};
pub use spectral::{
    eigenvalue_gradient, gram_spectrum, positive_spectrum, stable_rank, SpectralError, Spectrum,
    WeightMatrix,
};
pub use tail::{hill_estimator, sample_frechet, sample_pareto, HillK, TailError, TailEstimate};
