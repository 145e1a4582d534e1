//! Files written into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bnn_core::likelihoods::Aggregated;
use bnn_core::metrics::{write_calibration_csv, CalibrationReport};
use bnn_core::network::{Activation, LayerSpec};
use bnn_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CommandKind, RunConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Results {
    /// Mean negative predictive log-likelihood per test datum.
    pub nll: f64,
    pub error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_elbo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_completed: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcl_final_mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub run_id: String,
    pub elapsed_seconds: f64,
    pub command: CommandKind,
    pub config: RunConfig,
    pub architecture: Vec<String>,
    pub results: Results,
}

/// First 12 hex digits of the SHA-256 of the config echo.
pub fn run_id(config: &RunConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(6).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn render_architecture(specs: &[LayerSpec]) -> Vec<String> {
    specs
        .iter()
        .map(|s| match *s {
            LayerSpec::Dense {
                in_features,
                out_features,
                bias,
            } => format!("dense {in_features} {out_features}{}", if bias { " bias" } else { "" }),
            LayerSpec::Activation(Activation::Tanh) => "tanh".into(),
            LayerSpec::Activation(Activation::Relu) => "relu".into(),
            LayerSpec::Activation(Activation::Identity) => "identity".into(),
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Regression rows: `index,target_0..,mean_0..,sd_0..`. Classification
/// rows: `index,target,p_0..,predicted`. `group` adds a leading column (task
/// index for continual learning).
pub fn predictions_csv(aggregated: &Aggregated, targets: &Tensor, group: Option<&[usize]>) -> String {
    let mut out = String::new();
    let n = targets.rows();
    let tw = targets.cols();
    let lead = if group.is_some() { "task," } else { "" };
    match aggregated {
        Aggregated::Gaussian { mean, sd } => {
            let w = mean.cols();
            let cols: Vec<String> = (0..tw)
                .map(|j| format!("target_{j}"))
                .chain((0..w).map(|j| format!("mean_{j}")))
                .chain((0..w).map(|j| format!("sd_{j}")))
                .collect();
            let _ = writeln!(out, "{lead}index,{}", cols.join(","));
            for r in 0..n {
                let vals: Vec<String> = targets
                    .row(r)
                    .iter()
                    .chain(mean.row(r))
                    .chain(sd.row(r))
                    .map(|&v| num(v))
                    .collect();
                let g = group.map(|g| format!("{},", g[r])).unwrap_or_default();
                let _ = writeln!(out, "{g}{r},{}", vals.join(","));
            }
        }
        Aggregated::Probabilities(p) => {
            let probs = class_probabilities(p);
            let k = probs.cols();
            let cols: Vec<String> = (0..k).map(|j| format!("p_{j}")).collect();
            let _ = writeln!(out, "{lead}index,target,{},predicted", cols.join(","));
            for r in 0..n {
                let row = probs.row(r);
                let pred = argmax(row);
                let vals: Vec<String> = row.iter().map(|&v| num(v)).collect();
                let g = group.map(|g| format!("{},", g[r])).unwrap_or_default();
                let _ = writeln!(out, "{g}{r},{},{},{pred}", num(targets.at(r, 0)), vals.join(","));
            }
        }
    }
    out
}

/// Bernoulli outputs `p` become the two-column simplex `[1 - p, p]`.
pub fn class_probabilities(p: &Tensor) -> Tensor {
    if p.cols() != 1 {
        return p.clone();
    }
    let data = p.data().iter().flat_map(|&q| [1.0 - q, q]).collect();
    Tensor::matrix(p.rows(), 2, data).expect("two columns")
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn trace_csv(losses: &[f64], steps_per_epoch: usize, first_epoch: usize) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", first_epoch + i / steps_per_epoch, i % steps_per_epoch, num(*l));
    }
    out
}

pub fn grid_csv(xs: &[f64], mean: &Tensor, sd: &Tensor) -> String {
    let mut out = String::from("x,mean,sd\n");
    for (r, x) in xs.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", num(*x), num(mean.at(r, 0)), num(sd.at(r, 0)));
    }
    out
}

pub fn calibration_csv(report: &CalibrationReport) -> Result<String> {
    let mut buf = Vec::new();
    write_calibration_csv(report, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn ecdf_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("entropy,ecdf\n");
    for (h, c) in points {
        let _ = writeln!(out, "{},{}", num(*h), num(*c));
    }
    out
}
