//! Distribution values: priors, guide factors and likelihood heads.
//!
//! Every distribution exists twice: as a plain value type operating on
//! [`Tensor`]s, and as graph helpers that emit differentiable log densities
//! and KL terms into a [`Graph`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest standard deviation any computation is allowed to produce.
pub const SD_FLOOR: f64 = 1e-6;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Standard-normal draws of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Factorized Gaussian with element-wise mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalNormal {
    mean: Tensor,
    sd: Tensor,
}

impl DiagonalNormal {
    /// `sd` must be positive; values below [`SD_FLOOR`] are raised to it.
    pub fn new(mean: Tensor, sd: Tensor) -> Result<Self> {
        if mean.shape() != sd.shape() {
            return Err(Error::Contract(format!(
                "normal mean {:?} and sd {:?} differ in shape",
                mean.shape(),
                sd.shape()
            )));
        }
        if !mean.is_finite() || sd.data().iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Contract("normal needs finite mean and positive finite sd".into()));
        }
        let sd = sd.map(|s| s.max(SD_FLOOR));
        Ok(Self { mean, sd })
    }

    /// The same scalar `N(mean, sd²)` replicated over `shape`.
    pub fn iid(mean: f64, sd: f64, shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::full(shape, mean), Tensor::full(shape, sd))
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self::iid(0.0, 1.0, shape).expect("unit normal is valid")
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn sd(&self) -> &Tensor {
        &self.sd
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        let z = value.zip_map(&self.mean, |x, m| x - m)?;
        z.zip_map(&self.sd, |d, s| -HALF_LN_2PI - s.ln() - 0.5 * (d / s) * (d / s))
    }

    /// `mean + sd ∘ noise`.
    pub fn sample_reparameterized(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.shape() {
            return Err(Error::Contract(format!(
                "noise shape {:?} does not match {:?}",
                noise.shape(),
                self.shape()
            )));
        }
        let scaled = self.sd.zip_map(noise, |s, e| s * e)?;
        self.mean.zip_map(&scaled, |m, d| m + d)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let eps = standard_normal(rng, self.shape());
        self.sample_reparameterized(&eps).expect("noise drawn at matching shape")
    }
}

/// `Σ ln(σ_p/σ_q) + (σ_q² + (μ_q − μ_p)²)/(2σ_p²) − ½` over all elements.
pub fn kl_normal_normal(q: &DiagonalNormal, p: &DiagonalNormal) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(Error::Contract(format!(
            "KL between shapes {:?} and {:?}",
            q.shape(),
            p.shape()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.mean.len() {
        let (mq, sq) = (q.mean.data()[i], q.sd.data()[i]);
        let (mp, sp) = (p.mean.data()[i], p.sd.data()[i]);
        kl += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Laplace distribution; the non-Gaussian prior option, which has no
/// closed-form KL against a Gaussian guide.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplace {
    loc: Tensor,
    scale: Tensor,
}

impl Laplace {
    pub fn new(loc: Tensor, scale: Tensor) -> Result<Self> {
        if loc.shape() != scale.shape() || scale.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract("laplace needs matching shapes and positive scale".into()));
        }
        Ok(Self { loc, scale })
    }

    pub fn iid(loc: f64, scale: f64, shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::full(shape, loc), Tensor::full(shape, scale))
    }

    pub fn loc(&self) -> &Tensor {
        &self.loc
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        let d = value.zip_map(&self.loc, |x, m| (x - m).abs())?;
        d.zip_map(&self.scale, |d, b| -(2.0 * b).ln() - d / b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let u: Vec<f64> = (0..self.loc.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let data = u
            .iter()
            .zip(self.loc.data().iter().zip(self.scale.data()))
            .map(|(&u, (&m, &b))| m - b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln())
            .collect();
        Tensor::new(self.loc.shape().to_vec(), data).expect("shape preserved")
    }
}

/// A prior distribution attached to a parameter site.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteDistribution {
    Normal(DiagonalNormal),
    Laplace(Laplace),
}

impl SiteDistribution {
    pub fn kind(&self) -> &'static str {
        match self {
            SiteDistribution::Normal(_) => "normal",
            SiteDistribution::Laplace(_) => "laplace",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            SiteDistribution::Normal(d) => d.shape(),
            SiteDistribution::Laplace(d) => d.loc().shape(),
        }
    }

    pub fn as_normal(&self) -> Option<&DiagonalNormal> {
        match self {
            SiteDistribution::Normal(d) => Some(d),
            _ => None,
        }
    }

    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        match self {
            SiteDistribution::Normal(d) => d.log_prob(value),
            SiteDistribution::Laplace(d) => d.log_prob(value),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self {
            SiteDistribution::Normal(d) => d.sample(rng),
            SiteDistribution::Laplace(d) => d.sample(rng),
        }
    }

    /// Summed log density of a graph value, as a scalar node.
    pub fn log_prob_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            SiteDistribution::Normal(d) => {
                let m = g.constant(d.mean().clone());
                let s = g.constant(d.sd().clone());
                let lp = normal_log_prob_graph(g, x, m, s)?;
                g.sum(lp)
            }
            SiteDistribution::Laplace(d) => {
                let m = g.constant(d.loc().clone());
                let b = g.constant(d.scale().clone());
                let diff = g.sub(x, m)?;
                let a = g.abs(diff)?;
                let r = g.div(a, b)?;
                let s = g.sum(r)?;
                let norm: f64 = d.scale().data().iter().map(|b| (2.0 * b).ln()).sum();
                let neg = g.neg(s)?;
                g.offset(neg, -norm)
            }
        }
    }
}

impl From<DiagonalNormal> for SiteDistribution {
    fn from(d: DiagonalNormal) -> Self {
        SiteDistribution::Normal(d)
    }
}

/// Element-wise Gaussian log density of `x` under `N(mean, sd²)` in a graph.
pub fn normal_log_prob_graph(g: &mut Graph, x: Var, mean: Var, sd: Var) -> Result<Var> {
    let d = g.sub(x, mean)?;
    let z = g.div(d, sd)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, -0.5)?;
    let ls = g.log(sd)?;
    let t = g.sub(half, ls)?;
    g.offset(t, -HALF_LN_2PI)
}

/// Closed-form `KL(q ‖ p)` where `q = N(mean, exp(rho)²)` lives in the graph
/// and `p` is a constant.
pub fn kl_normal_graph(g: &mut Graph, q_mean: Var, q_rho: Var, p: &DiagonalNormal) -> Result<Var> {
    let pm = g.constant(p.mean().clone());
    let inv_two_var = g.constant(p.sd().map(|s| 1.0 / (2.0 * s * s)));
    let ln_sp: f64 = p.sd().data().iter().map(|s| s.ln()).sum();
    let two_rho = g.scale(q_rho, 2.0)?;
    let var_q = g.exp(two_rho)?;
    let diff = g.sub(q_mean, pm)?;
    let d2 = g.square(diff)?;
    let num = g.add(var_q, d2)?;
    let quad = g.mul(num, inv_two_var)?;
    let body = g.sub(quad, q_rho)?;
    let total = g.sum(body)?;
    let count = p.mean().len() as f64;
    g.offset(total, ln_sp - 0.5 * count)
}

/// Bernoulli over logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliDist {
    logits: Tensor,
}

impl BernoulliDist {
    pub fn new(logits: Tensor) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::Contract("bernoulli logits must be finite".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> Tensor {
        self.logits.map(|l| 1.0 / (1.0 + (-l).exp()))
    }

    /// `y·l − softplus(l)` per element.
    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        check_binary(value)?;
        value.zip_map(&self.logits, |y, l| y * l - crate::tensor::softplus(l))
    }
}

pub(crate) fn check_binary(value: &Tensor) -> Result<()> {
    if let Some(v) = value.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Support(format!("bernoulli value {v} not in {{0, 1}}")));
    }
    Ok(())
}

/// Categorical over the last axis of a logit tensor (`K` or `B×K`).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    logits: Tensor,
}

impl CategoricalDist {
    pub fn new(logits: Tensor) -> Result<Self> {
        let k = *logits.shape().last().unwrap_or(&0);
        if k < 2 {
            return Err(Error::Contract(format!("categorical needs K ≥ 2, got {k}")));
        }
        if !logits.is_finite() {
            return Err(Error::Contract("categorical logits must be finite".into()));
        }
        Ok(Self { logits })
    }

    pub fn num_classes(&self) -> usize {
        *self.logits.shape().last().expect("checked in new")
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.data().chunks(self.num_classes())
    }

    fn log_softmax_rows(&self) -> Vec<Vec<f64>> {
        self.rows()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect()
    }

    pub fn probs(&self) -> Tensor {
        let data = self
            .log_softmax_rows()
            .into_iter()
            .flatten()
            .map(f64::exp)
            .collect();
        Tensor::new(self.logits.shape().to_vec(), data).expect("shape preserved")
    }

    /// Log mass of one class index per distribution row.
    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        let k = self.num_classes();
        let rows = self.log_softmax_rows();
        if value.len() != rows.len() {
            return Err(Error::Contract(format!(
                "{} categorical values for {} distributions",
                value.len(),
                rows.len()
            )));
        }
        let out = value
            .data()
            .iter()
            .zip(&rows)
            .map(|(&v, row)| {
                let idx = class_index(v, k)?;
                Ok(row[idx])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::vector(out))
    }

    /// `−Σ p ln p` per row.
    pub fn entropy(&self) -> Tensor {
        let out = self
            .log_softmax_rows()
            .iter()
            .map(|row| -row.iter().map(|lp| lp.exp() * lp).sum::<f64>())
            .map(|h| h.max(0.0))
            .collect();
        Tensor::vector(out)
    }
}

pub(crate) fn class_index(v: f64, k: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= k as f64 {
        return Err(Error::Support(format!("class label {v} not in 0..{k}")));
    }
    Ok(v as usize)
}

/// Entropy of probability rows (already normalized), in nats.
pub fn entropy_of_probs(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
