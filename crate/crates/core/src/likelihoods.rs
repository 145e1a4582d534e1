//! Observation models: data log-likelihoods, aggregation of sampled
//! predictions and error measures.

use std::fmt;
use std::str::FromStr;

use crate::distributions::{check_binary, class_index, HALF_LN_2PI, SD_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{softplus, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodKind {
    Bernoulli,
    Categorical,
    HomoskedasticGaussian { sd: f64 },
    HeteroskedasticGaussian,
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    /// `categorical | bernoulli | gaussian:sd=0.1 | heteroskedastic`
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "categorical" => return Ok(Self::Categorical),
            "bernoulli" => return Ok(Self::Bernoulli),
            "heteroskedastic" => return Ok(Self::HeteroskedasticGaussian),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("gaussian:sd=") {
            let sd: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad gaussian sd {rest:?}")))?;
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::Config(format!("gaussian sd must be positive, got {sd}")));
            }
            return Ok(Self::HomoskedasticGaussian { sd });
        }
        Err(Error::Config(format!("unknown likelihood {s:?}")))
    }
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bernoulli => write!(f, "bernoulli"),
            Self::Categorical => write!(f, "categorical"),
            Self::HomoskedasticGaussian { sd } => write!(f, "gaussian:sd={sd}"),
            Self::HeteroskedasticGaussian => write!(f, "heteroskedastic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub kind: LikelihoodKind,
    pub dataset_size: usize,
}

/// Predictions combined across posterior samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregated {
    /// Class probabilities (`B×K`) or success probabilities (`B×d`).
    Probabilities(Tensor),
    /// Per-output predictive mean and sd, both `B×d`.
    Gaussian { mean: Tensor, sd: Tensor },
}

impl Aggregated {
    pub fn values(&self) -> &Tensor {
        match self {
            Aggregated::Probabilities(p) => p,
            Aggregated::Gaussian { mean, .. } => mean,
        }
    }
}

fn check_mask(mask: Option<&[bool]>, batch: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != batch => Err(Error::Contract(format!(
            "mask has {} entries for a batch of {batch}",
            m.len()
        ))),
        _ => Ok(()),
    }
}

/// Sum that does not depend on the order of its inputs.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
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

impl Likelihood {
    pub fn new(kind: LikelihoodKind, dataset_size: usize) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        if let LikelihoodKind::HomoskedasticGaussian { sd } = kind {
            if !(sd > 0.0) {
                return Err(Error::Config(format!("gaussian sd must be positive, got {sd}")));
            }
        }
        Ok(Self { kind, dataset_size })
    }

    /// Network output width needed for targets of the given width (class
    /// count for categorical).
    pub fn output_width(&self, target_width: usize) -> usize {
        match self.kind {
            LikelihoodKind::HeteroskedasticGaussian => 2 * target_width,
            _ => target_width,
        }
    }

    /// Brings targets into the `B×d` layout matching `pred_shape`, checking
    /// widths and value domains.
    fn targets_matrix(&self, pred_shape: &[usize], targets: &Tensor) -> Result<Tensor> {
        if pred_shape.len() != 2 {
            return Err(Error::Contract(format!("predictions must be B×W, got {pred_shape:?}")));
        }
        let (b, w) = (pred_shape[0], pred_shape[1]);
        if targets.rows() != b || targets.rank() == 0 {
            return Err(Error::Contract(format!(
                "{} targets for {b} predictions",
                if targets.rank() == 0 { 1 } else { targets.rows() }
            )));
        }
        let width = match self.kind {
            LikelihoodKind::Categorical => 1,
            LikelihoodKind::HeteroskedasticGaussian => {
                if w % 2 != 0 {
                    return Err(Error::Contract(format!(
                        "heteroskedastic predictions need an even width, got {w}"
                    )));
                }
                w / 2
            }
            _ => w,
        };
        if targets.cols() != width {
            return Err(Error::Contract(format!(
                "target width {} does not match prediction width {w} for {}",
                targets.cols(),
                self.kind
            )));
        }
        let t = targets.reshape(vec![b, width])?;
        match self.kind {
            LikelihoodKind::Categorical => {
                if w < 2 {
                    return Err(Error::Contract("categorical needs at least 2 classes".into()));
                }
                for &v in t.data() {
                    class_index(v, w)?;
                }
            }
            LikelihoodKind::Bernoulli => check_binary(&t)?,
            _ => {}
        }
        Ok(t)
    }

    /// Summed log-likelihood of the included batch elements as a scalar graph
    /// node. Excluded rows contribute exactly zero.
    pub fn log_likelihood_graph(
        &self,
        g: &mut Graph,
        pred: Var,
        targets: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = g.shape(pred).to_vec();
        let t = self.targets_matrix(&shape, targets)?;
        let b = shape[0];
        check_mask(mask, b)?;
        let row_weight = |r: usize| if mask.is_none_or(|m| m[r]) { 1.0 } else { 0.0 };

        let (terms, width) = match self.kind {
            LikelihoodKind::HomoskedasticGaussian { sd } => {
                let y = g.constant(t.clone());
                let m = normal_terms(g, y, pred, None, sd)?;
                (m, t.cols())
            }
            LikelihoodKind::HeteroskedasticGaussian => {
                let d = t.cols();
                let mu = g.slice_cols(pred, 0, d)?;
                let raw = g.slice_cols(pred, d, 2 * d)?;
                let sp = g.softplus(raw)?;
                let sd = g.offset(sp, SD_FLOOR)?;
                let y = g.constant(t.clone());
                (normal_terms(g, y, mu, Some(sd), 0.0)?, d)
            }
            LikelihoodKind::Bernoulli => {
                let y = g.constant(t.clone());
                let yl = g.mul(pred, y)?;
                let sp = g.softplus(pred)?;
                (g.sub(yl, sp)?, t.cols())
            }
            LikelihoodKind::Categorical => {
                let k = shape[1];
                let ls = g.log_softmax(pred)?;
                let mut sel = Tensor::zeros(&[b, k]);
                for r in 0..b {
                    let c = class_index(t.at(r, 0), k)?;
                    sel.data_mut()[r * k + c] = row_weight(r);
                }
                let sel = g.constant(sel);
                let picked = g.mul(ls, sel)?;
                return g.sum(picked);
            }
        };
        let weighted = match mask {
            None => terms,
            Some(_) => {
                let mut w = Tensor::zeros(&[b, width]);
                for r in 0..b {
                    let v = row_weight(r);
                    w.data_mut()[r * width..(r + 1) * width].fill(v);
                }
                let w = g.constant(w);
                g.mul(terms, w)?
            }
        };
        g.sum(weighted)
    }

    /// Value form of [`Likelihood::log_likelihood_graph`].
    pub fn batch_log_likelihood(&self, predictions: &Tensor, targets: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(predictions.clone());
        let ll = self.log_likelihood_graph(&mut g, p, targets, mask)?;
        Ok(g.value(ll).item())
    }

    /// Combines stacked `S×B×W` network outputs into a predictive summary.
    /// The result does not depend on the order of the samples.
    pub fn aggregate_predictions(&self, stacked: &Tensor) -> Result<Aggregated> {
        if stacked.rank() != 3 {
            return Err(Error::Contract(format!(
                "stacked predictions must be S×B×W, got {:?}",
                stacked.shape()
            )));
        }
        let (s, b, w) = (stacked.shape()[0], stacked.shape()[1], stacked.shape()[2]);
        if s == 0 {
            return Err(Error::Contract("cannot aggregate zero samples".into()));
        }
        let samples = stacked.unstack();
        let column = |f: &dyn Fn(&Tensor, usize) -> f64, idx: usize| -> Vec<f64> {
            samples.iter().map(|t| f(t, idx)).collect()
        };
        let sf = s as f64;
        match self.kind {
            LikelihoodKind::Categorical | LikelihoodKind::Bernoulli => {
                let probs: Vec<Tensor> = samples
                    .iter()
                    .map(|t| match self.kind {
                        LikelihoodKind::Categorical => softmax_rows(t),
                        _ => t.map(sigmoid),
                    })
                    .collect();
                let mut out = vec![0.0; b * w];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut col: Vec<f64> = probs.iter().map(|p| p.data()[i]).collect();
                    *o = canonical_sum(&mut col) / sf;
                }
                Ok(Aggregated::Probabilities(Tensor::matrix(b, w, out)?))
            }
            LikelihoodKind::HomoskedasticGaussian { .. } => {
                let mut mean = vec![0.0; b * w];
                let mut sd = vec![0.0; b * w];
                for i in 0..b * w {
                    let mut col = column(&|t, i| t.data()[i], i);
                    let m = canonical_sum(&mut col) / sf;
                    let mut dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
                    mean[i] = m;
                    sd[i] = (canonical_sum(&mut dev) / sf).sqrt();
                }
                Ok(Aggregated::Gaussian {
                    mean: Tensor::matrix(b, w, mean)?,
                    sd: Tensor::matrix(b, w, sd)?,
                })
            }
            LikelihoodKind::HeteroskedasticGaussian => {
                if w % 2 != 0 {
                    return Err(Error::Contract(format!(
                        "heteroskedastic predictions need an even width, got {w}"
                    )));
                }
                let d = w / 2;
                let mut mean = vec![0.0; b * d];
                let mut sd = vec![0.0; b * d];
                for r in 0..b {
                    for c in 0..d {
                        let mu = column(&|t, _| t.at(r, c), 0);
                        let sig = column(&|t, _| softplus(t.at(r, d + c)) + SD_FLOOR, 0);
                        let (m, s_) = precision_weighted(&mu, &sig);
                        mean[r * d + c] = m;
                        sd[r * d + c] = s_;
                    }
                }
                Ok(Aggregated::Gaussian {
                    mean: Tensor::matrix(b, d, mean)?,
                    sd: Tensor::matrix(b, d, sd)?,
                })
            }
        }
    }

    /// Mean squared error for Gaussian models, misclassification rate for
    /// discrete ones.
    pub fn error(&self, aggregated: &Aggregated, targets: &Tensor) -> Result<f64> {
        let v = aggregated.values();
        match (self.kind, aggregated) {
            (LikelihoodKind::Categorical, Aggregated::Probabilities(p)) => {
                let t = self.targets_matrix(p.shape(), targets)?;
                let wrong = (0..p.rows())
                    .filter(|&r| argmax(p.row(r)) as f64 != t.at(r, 0))
                    .count();
                Ok(wrong as f64 / p.rows() as f64)
            }
            (LikelihoodKind::Bernoulli, Aggregated::Probabilities(p)) => {
                let t = self.targets_matrix(p.shape(), targets)?;
                let wrong = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .filter(|(&p, &y)| (p > 0.5) != (y == 1.0))
                    .count();
                Ok(wrong as f64 / p.len() as f64)
            }
            (
                LikelihoodKind::HomoskedasticGaussian { .. } | LikelihoodKind::HeteroskedasticGaussian,
                Aggregated::Gaussian { mean, .. },
            ) => {
                let t = targets.reshape(mean.shape().to_vec())?;
                let se = mean.zip_map(&t, |a, b| (a - b) * (a - b))?;
                Ok(se.mean())
            }
            _ => Err(Error::Contract(format!(
                "aggregated predictions of shape {:?} do not fit a {} likelihood",
                v.shape(),
                self.kind
            ))),
        }
    }

    /// Mean log-likelihood per datum of `targets` under the aggregated
    /// predictive distribution.
    ///
    /// The homoskedastic predictive sd combines the spread across samples with
    /// the observation noise.
    pub fn predictive_log_likelihood(&self, aggregated: &Aggregated, targets: &Tensor) -> Result<f64> {
        let ln = |p: f64| p.max(f64::MIN_POSITIVE).ln();
        match (self.kind, aggregated) {
            (LikelihoodKind::Categorical, Aggregated::Probabilities(p)) => {
                let t = self.targets_matrix(p.shape(), targets)?;
                let k = p.cols();
                let mut total = 0.0;
                for r in 0..p.rows() {
                    total += ln(p.at(r, class_index(t.at(r, 0), k)?));
                }
                Ok(total / p.rows() as f64)
            }
            (LikelihoodKind::Bernoulli, Aggregated::Probabilities(p)) => {
                let t = self.targets_matrix(p.shape(), targets)?;
                let total: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &y)| if y == 1.0 { ln(p) } else { ln(1.0 - p) })
                    .sum();
                Ok(total / p.rows() as f64)
            }
            (
                LikelihoodKind::HomoskedasticGaussian { .. } | LikelihoodKind::HeteroskedasticGaussian,
                Aggregated::Gaussian { mean, sd },
            ) => {
                let t = targets.reshape(mean.shape().to_vec())?;
                let noise = match self.kind {
                    LikelihoodKind::HomoskedasticGaussian { sd } => sd,
                    _ => 0.0,
                };
                let mut total = 0.0;
                for i in 0..mean.len() {
                    let s = (sd.data()[i].powi(2) + noise * noise).sqrt().max(SD_FLOOR);
                    let z = (t.data()[i] - mean.data()[i]) / s;
                    total += -0.5 * z * z - s.ln() - HALF_LN_2PI;
                }
                Ok(total / mean.rows() as f64)
            }
            _ => Err(Error::Contract(format!(
                "aggregated predictions do not fit a {} likelihood",
                self.kind
            ))),
        }
    }
}

/// Element-wise Gaussian log density of `y` under `N(mean, sd²)`; `sd` is either
/// a graph node or the constant `fixed_sd`.
fn normal_terms(g: &mut Graph, y: Var, mean: Var, sd: Option<Var>, fixed_sd: f64) -> Result<Var> {
    let diff = g.sub(y, mean)?;
    match sd {
        Some(s) => {
            let z = g.div(diff, s)?;
            let z2 = g.square(z)?;
            let half = g.scale(z2, -0.5)?;
            let ls = g.log(s)?;
            let t = g.sub(half, ls)?;
            g.offset(t, -HALF_LN_2PI)
        }
        None => {
            let z = g.scale(diff, 1.0 / fixed_sd)?;
            let z2 = g.square(z)?;
            let half = g.scale(z2, -0.5)?;
            g.offset(half, -fixed_sd.ln() - HALF_LN_2PI)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Precision-weighted mean of per-sample Gaussians and the total sd
/// `sqrt(S / Σ σ⁻² + var(μ))`.
pub fn precision_weighted(mu: &[f64], sigma: &[f64]) -> (f64, f64) {
    let s = mu.len() as f64;
    let mut prec: Vec<f64> = sigma.iter().map(|v| 1.0 / (v * v)).collect();
    let mut weighted: Vec<f64> = mu.iter().zip(&prec).map(|(m, p)| m * p).collect();
    let total_prec = canonical_sum(&mut prec);
    let mean = canonical_sum(&mut weighted) / total_prec;
    let mut m2 = mu.to_vec();
    let mu_bar = canonical_sum(&mut m2) / s;
    let mut dev: Vec<f64> = mu.iter().map(|m| (m - mu_bar) * (m - mu_bar)).collect();
    let spread = canonical_sum(&mut dev) / s;
    (mean, (s / total_prec + spread).sqrt())
}
