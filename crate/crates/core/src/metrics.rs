//! Calibration and out-of-distribution metrics over predicted class
//! probabilities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distributions::entropy_of_probs;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 10;
const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the bin, 0 when empty.
    pub confidence: f64,
    /// Accuracy of the bin, 0 when empty.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

fn check_simplex(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 || probs.cols() == 0 {
        return Err(Error::Contract(format!("probabilities must be B×K, got {:?}", probs.shape())));
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= -SIMPLEX_TOLERANCE)) || (s - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Contract(format!("row {r} is not a probability simplex (sum {s})")));
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the bin `(b/n, (b+1)/n]` holding `c`, with the first bin closed at 0.
fn bin_index(c: f64, n: usize) -> usize {
    let edge = |b: usize| b as f64 / n as f64;
    let mut b = ((c * n as f64).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while b > 0 && c <= edge(b) {
        b -= 1;
    }
    while b + 1 < n && c > edge(b + 1) {
        b += 1;
    }
    b
}

/// Expected calibration error with `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    check_simplex(probs)?;
    if labels.len() != probs.rows() {
        return Err(Error::Contract(format!(
            "{} labels for {} predictions",
            labels.len(),
            probs.rows()
        )));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        let k = argmax(row);
        let b = bin_index(row[k], bins);
        count[b] += 1;
        conf[b] += row[k];
        correct[b] += (k == label) as usize;
    }
    let n = probs.rows() as f64;
    let mut ece = 0.0;
    let stats = (0..bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[b] as f64;
                (conf[b] / c, correct[b] as f64 / c)
            };
            ece += count[b] as f64 / n * (accuracy - confidence).abs();
            BinStat {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport { bins: stats, ece })
}

/// Calibration curve as CSV: `bin_center,confidence,accuracy,count`.
pub fn write_calibration_csv<W: Write>(report: &CalibrationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["bin_center", "confidence", "accuracy", "count"]).map_err(io)?;
    for b in &report.bins {
        w.write_record(&[
            ((b.lower + b.upper) / 2.0).to_string(),
            b.confidence.to_string(),
            b.accuracy.to_string(),
            b.count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Area under the ROC curve for "`id` scores exceed `ood` scores", from the
/// Mann–Whitney statistic with midranks for ties.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Contract("auroc needs nonempty score sets".into()));
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Midranks doubled to stay in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank_sum2 += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let (n1, n0) = (id.len() as u128, ood.len() as u128);
    let u2 = rank_sum2 - n1 * (n1 + 1);
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// AUROC of in-distribution against OOD rows scored by maximum probability.
pub fn ood_auroc(id_probs: &Tensor, ood_probs: &Tensor) -> Result<f64> {
    check_simplex(id_probs)?;
    check_simplex(ood_probs)?;
    let score = |p: &Tensor| -> Vec<f64> { (0..p.rows()).map(|r| p.row(r)[argmax(p.row(r))]).collect() };
    auroc(&score(id_probs), &score(ood_probs))
}

/// Sorted per-row entropies with ECDF levels `i/N`.
pub fn entropy_ecdf(probs: &Tensor) -> Result<Vec<(f64, f64)>> {
    check_simplex(probs)?;
    let mut h: Vec<f64> = (0..probs.rows()).map(|r| entropy_of_probs(probs.row(r))).collect();
    h.sort_by(f64::total_cmp);
    let n = h.len() as f64;
    Ok(h.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect())
}
