//! Full-batch Hamiltonian Monte Carlo over the Bayesian sites of a network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::likelihoods::{Aggregated, Likelihood};
use crate::network::Network;
use crate::svi::parallel_map;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Hmc,
    Nuts,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmc" => Ok(Self::Hmc),
            "nuts" => Ok(Self::Nuts),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hmc => "hmc",
            Self::Nuts => "nuts",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Mass {
    #[default]
    Identity,
    /// Diagonal over the flattened sites, in site order.
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub num_samples: usize,
    pub mass: Mass,
    pub kernel: Kernel,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.001,
            leapfrog_steps: 50,
            warmup: 500,
            num_samples: 1000,
            mass: Mass::Identity,
            kernel: Kernel::Hmc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Vec<BTreeMap<String, Tensor>>,
    /// Fraction of accepted proposals after warmup.
    pub acceptance_rate: f64,
    pub divergences: usize,
}

impl PosteriorSamples {
    /// Values of one site across all samples, flattened in sample order.
    pub fn site_values(&self, name: &str) -> Vec<f64> {
        self.samples
            .iter()
            .flat_map(|s| s[name].data().to_vec())
            .collect()
    }
}

/// `U = -(Σ log p(y|x,w) + Σ log p(w))` and its gradient per Bayesian site.
/// With `data == None` only the prior contributes.
pub fn potential_energy(
    net: &Network,
    lik: &Likelihood,
    params: &BTreeMap<String, Tensor>,
    data: Option<&Dataset>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut values = BTreeMap::new();
    let mut terms = Vec::new();
    for s in net.sites() {
        let v = match s.prior() {
            Some(prior) => {
                let value = params
                    .get(&s.name)
                    .ok_or_else(|| Error::Contract(format!("no value for bayesian site {:?}", s.name)))?;
                let v = g.leaf(&s.name, value.clone(), true)?;
                terms.push(prior.log_prob_graph(&mut g, v)?);
                v
            }
            None => g.constant(s.deterministic_value().expect("deterministic").clone()),
        };
        values.insert(s.name.clone(), v);
    }
    if let Some(d) = data {
        let x = g.constant(d.inputs.clone());
        let out = net.forward_graph(&mut g, x, |g, call| {
            crate::network::dense_plain(g, call.input, values[&call.weight.name], call.bias.map(|b| values[&b.name]))
        })?;
        terms.push(lik.log_likelihood_graph(&mut g, out, &d.targets, None)?);
    }
    let mut total = g.scalar(0.0);
    for t in terms {
        total = g.add(total, t)?;
    }
    let u = g.neg(total)?;
    let value = g.value(u).item();
    if !value.is_finite() {
        return Err(Error::Numeric {
            context: "potential energy".into(),
            detail: "non-finite value".into(),
        });
    }
    Ok((value, g.backward(u)?.into_map()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
    pub divergent: bool,
}

/// Half-kick, `steps` drifts with full kicks in between, half-kick.
///
/// `grad_u` returns `U(q)` and `∇U(q)`; an error or a non-finite state marks
/// the trajectory divergent and stops integration.
pub fn leapfrog<F>(
    q: &[f64],
    p: &[f64],
    grad0: &[f64],
    step_size: f64,
    steps: usize,
    inv_mass: &[f64],
    mut grad_u: F,
) -> LeapfrogState
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut grad = grad0.to_vec();
    let mut potential = f64::NAN;
    let diverged = |q: Vec<f64>, p: Vec<f64>, grad: Vec<f64>| LeapfrogState {
        q,
        p,
        potential: f64::INFINITY,
        grad,
        divergent: true,
    };
    for (pi, gi) in p.iter_mut().zip(&grad) {
        *pi -= 0.5 * step_size * gi;
    }
    for step in 0..steps {
        for ((qi, pi), m) in q.iter_mut().zip(&p).zip(inv_mass) {
            *qi += step_size * m * pi;
        }
        match grad_u(&q) {
            Ok((u, g)) if u.is_finite() && g.iter().all(|v| v.is_finite()) => {
                potential = u;
                grad = g;
            }
            _ => return diverged(q, p, grad),
        }
        let kick = if step + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi -= kick * step_size * gi;
        }
    }
    if steps == 0 {
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step_size * gi;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return diverged(q, p, grad);
    }
    LeapfrogState {
        q,
        p,
        potential,
        grad,
        divergent: false,
    }
}

fn flatten(net: &Network, params: &BTreeMap<String, Tensor>) -> Vec<f64> {
    net.bayesian_sites()
        .flat_map(|s| params[&s.name].data().to_vec())
        .collect()
}

fn unflatten(net: &Network, flat: &[f64]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut pos = 0;
    for s in net.bayesian_sites() {
        let n: usize = s.shape.iter().product();
        out.insert(
            s.name.clone(),
            Tensor::new(s.shape.clone(), flat[pos..pos + n].to_vec()).expect("site shape"),
        );
        pos += n;
    }
    out
}

fn validate(cfg: &HmcConfig, dim: usize) -> Result<Vec<f64>> {
    if cfg.kernel == Kernel::Nuts {
        return Err(Error::Unsupported("the nuts kernel is not implemented; use hmc".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {}", cfg.step_size)));
    }
    if cfg.leapfrog_steps == 0 || cfg.num_samples == 0 {
        return Err(Error::Config("leapfrog steps and sample count must be positive".into()));
    }
    match &cfg.mass {
        Mass::Identity => Ok(vec![1.0; dim]),
        Mass::Diagonal(m) => {
            if m.len() != dim {
                return Err(Error::Config(format!("mass has {} entries for {dim} parameters", m.len())));
            }
            if m.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("mass entries must be positive".into()));
            }
            Ok(m.clone())
        }
    }
}

/// Runs one chain. The start is a layer-scaled `N(0, 1/fan_in)` draw; the
/// first `warmup` iterations are discarded.
pub fn hmc_sample(
    net: &Network,
    lik: &Likelihood,
    data: Option<&Dataset>,
    cfg: &HmcConfig,
    seed: u64,
) -> Result<PosteriorSamples> {
    let dim: usize = net.bayesian_sites().map(|s| s.shape.iter().product::<usize>()).sum();
    let mass = validate(cfg, dim)?;
    let inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let init: BTreeMap<String, Tensor> = net
        .bayesian_sites()
        .map(|s| {
            let scale = 1.0 / (s.fan_in as f64).sqrt();
            (s.name.clone(), standard_normal(&mut rng, &s.shape).map(|v| v * scale))
        })
        .collect();
    let grad_u = |q: &[f64]| -> Result<(f64, Vec<f64>)> {
        let params = unflatten(net, q);
        let (u, g) = potential_energy(net, lik, &params, data)?;
        Ok((u, flatten(net, &g)))
    };
    let mut q = flatten(net, &init);
    let (mut u, mut grad) = grad_u(&q)?;

    let mut samples = Vec::with_capacity(cfg.num_samples);
    let (mut warm_acc, mut acc, mut divergences) = (0usize, 0usize, 0usize);
    for it in 0..cfg.warmup + cfg.num_samples {
        let p: Vec<f64> = mass.iter().map(|m| m.sqrt() * standard_normal_scalar(&mut rng)).collect();
        let kinetic = |p: &[f64]| 0.5 * p.iter().zip(&inv_mass).map(|(p, m)| p * p * m).sum::<f64>();
        let h0 = u + kinetic(&p);
        let next = leapfrog(&q, &p, &grad, cfg.step_size, cfg.leapfrog_steps, &inv_mass, grad_u);
        let log_u: f64 = rng.random::<f64>().ln();
        let accepted = if next.divergent {
            divergences += 1;
            false
        } else {
            let h1 = next.potential + kinetic(&next.p);
            log_u < h0 - h1
        };
        if accepted {
            q = next.q;
            u = next.potential;
            grad = next.grad;
        }
        if it < cfg.warmup {
            warm_acc += accepted as usize;
            if it + 1 == cfg.warmup {
                let rate = warm_acc as f64 / cfg.warmup as f64;
                if rate < 0.01 {
                    return Err(Error::Numeric {
                        context: "hmc warmup".into(),
                        detail: format!("acceptance rate {rate:.4} below 0.01; try a smaller step size"),
                    });
                }
            }
        } else {
            acc += accepted as usize;
            samples.push(unflatten(net, &q));
        }
    }
    Ok(PosteriorSamples {
        samples,
        acceptance_rate: acc as f64 / cfg.num_samples as f64,
        divergences,
    })
}

fn standard_normal_scalar<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    standard_normal(rng, &[]).item()
}

/// Stacked `S×B×W` network outputs, one per posterior sample.
pub fn predict_from_samples(net: &Network, samples: &PosteriorSamples, inputs: &Tensor) -> Result<Tensor> {
    if samples.samples.is_empty() {
        return Err(Error::Contract("no posterior samples".into()));
    }
    let fixed = net.deterministic_values();
    let outs = parallel_map(samples.samples.len(), |i| {
        let mut params = fixed.clone();
        params.extend(samples.samples[i].iter().map(|(k, v)| (k.clone(), v.clone())));
        net.forward(&params, inputs)
    })?;
    Tensor::stack(&outs)
}

pub fn predict_aggregated(
    net: &Network,
    lik: &Likelihood,
    samples: &PosteriorSamples,
    inputs: &Tensor,
) -> Result<Aggregated> {
    lik.aggregate_predictions(&predict_from_samples(net, samples, inputs)?)
}
