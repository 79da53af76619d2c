//! CSV writers. Floats use Rust's shortest round-trip formatting so equal
//! runs produce byte-identical files.

use std::fmt::Write as _;

use crate::nn::MetricsRow;

pub const METRICS_SCHEMA: &str = "# htreg-metrics v1";
pub const SUMMARY_SCHEMA: &str = "# htreg-summary v1";
pub const ANALYSIS_SCHEMA: &str = "# htreg-analysis v1";

pub fn metrics_header(layers: usize) -> String {
    let mut h = String::from(
        "epoch,train_loss,test_loss,test_acc,lr,penalty_total,weighted_alpha_total",
    );
    for l in 1..=layers {
        write!(h, ",alpha_hat_{l},lambda_max_{l},stable_rank_{l}").unwrap();
    }
    h
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let layers = rows.first().map_or(0, |r| r.layers.len());
    let mut out = format!("{METRICS_SCHEMA}\n{}\n", metrics_header(layers));
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.test_loss, r.test_accuracy, r.lr, r.penalty_total, r.weighted_alpha_total
        )
        .unwrap();
        for l in &r.layers {
            write!(out, ",{},{},{}", opt(l.alpha_hat), l.lambda_max, l.stable_rank).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Final numbers of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub final_epoch: usize,
    pub test_acc: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub weighted_alpha_total: f64,
    pub mean_alpha_hat: f64,
}

/// Sample mean and standard error (`stddev / sqrt(n)`, NaN for a single value).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summary_csv(runs: &[RunSummary]) -> String {
    let mut out = format!(
        "{SUMMARY_SCHEMA}\nrun,seed,final_epoch,test_acc,test_loss,train_acc,weighted_alpha_total,mean_alpha_hat\n"
    );
    for (i, r) in runs.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            r.seed, r.final_epoch, r.test_acc, r.test_loss, r.train_acc, r.weighted_alpha_total, r.mean_alpha_hat
        )
        .unwrap();
    }
    let cols: [fn(&RunSummary) -> f64; 5] = [
        |r| r.test_acc,
        |r| r.test_loss,
        |r| r.train_acc,
        |r| r.weighted_alpha_total,
        |r| r.mean_alpha_hat,
    ];
    let stats: Vec<(f64, f64)> = cols
        .iter()
        .map(|f| mean_and_stderr(&runs.iter().map(f).collect::<Vec<_>>()))
        .collect();
    let line = |label: &str, pick: fn(&(f64, f64)) -> f64| {
        let vals: Vec<String> = stats.iter().map(|s| pick(s).to_string()).collect();
        format!("{label},,,{}\n", vals.join(","))
    };
    out.push_str(&line("mean", |s| s.0));
    out.push_str(&line("stderr", |s| s.1));
    out
}
