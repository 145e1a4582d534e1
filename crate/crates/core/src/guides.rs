//! Mean-field Gaussian guide over the Bayesian sites of a network.
//!
//! Each site carries a mean and an unconstrained `rho` with `sd = exp(rho)`.
//! After every optimizer step [`MeanFieldGuide::clamp`] projects `rho` back
//! into `[ln SD_FLOOR, ln max_sd]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::distributions::{kl_normal_normal, standard_normal, DiagonalNormal, SD_FLOOR};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Standard deviation used to initialize guides unless configured otherwise.
pub const DEFAULT_INIT_SD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum MeanInit {
    /// One draw from each site's prior.
    SamplePrior,
    /// Copy of given values, e.g. a pre-trained deterministic network.
    Pretrained(BTreeMap<String, Tensor>),
    /// `N(0, 1/fan_in)` draws, like standard deterministic initialization.
    LayerScaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitScheme {
    pub mean_init: MeanInit,
    pub sd_init: f64,
    pub train_mean: bool,
    pub train_sd: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            mean_init: MeanInit::LayerScaled,
            sd_init: DEFAULT_INIT_SD,
            train_mean: true,
            train_sd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideSite {
    pub name: String,
    pub loc: Tensor,
    pub rho: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGuide {
    sites: Vec<GuideSite>,
    pub train_mean: bool,
    pub train_sd: bool,
    max_sd: Option<f64>,
}

/// Name of the trainable mean tensor of a site.
pub fn loc_name(site: &str) -> String {
    format!("{site}.loc")
}

/// Name of the trainable log-sd tensor of a site.
pub fn rho_name(site: &str) -> String {
    format!("{site}.rho")
}

pub fn init_guide<R: Rng + ?Sized>(
    net: &Network,
    scheme: &InitScheme,
    max_sd: Option<f64>,
    rng: &mut R,
) -> Result<MeanFieldGuide> {
    if !(scheme.sd_init > 0.0) {
        return Err(Error::Config(format!("initial sd must be positive, got {}", scheme.sd_init)));
    }
    if let Some(cap) = max_sd {
        if !(cap >= SD_FLOOR) {
            return Err(Error::Config(format!("max sd must be at least {SD_FLOOR}, got {cap}")));
        }
        if scheme.sd_init > cap {
            return Err(Error::Config(format!(
                "initial sd {} exceeds the cap {cap}",
                scheme.sd_init
            )));
        }
    }
    let mut sites = Vec::new();
    for site in net.bayesian_sites() {
        let loc = match &scheme.mean_init {
            MeanInit::SamplePrior => site.prior().expect("bayesian").sample(rng),
            MeanInit::Pretrained(values) => {
                let v = values
                    .get(&site.name)
                    .ok_or_else(|| Error::Config(format!("pretrained values miss site {:?}", site.name)))?;
                if v.shape() != site.shape.as_slice() {
                    return Err(Error::Contract(format!(
                        "pretrained value for {:?} has shape {:?}",
                        site.name,
                        v.shape()
                    )));
                }
                v.clone()
            }
            MeanInit::LayerScaled => {
                let scale = 1.0 / (site.fan_in as f64).sqrt();
                standard_normal(rng, &site.shape).map(|e| e * scale)
            }
        };
        let rho = Tensor::full(&site.shape, scheme.sd_init.max(SD_FLOOR).ln());
        sites.push(GuideSite {
            name: site.name.clone(),
            loc,
            rho,
        });
    }
    Ok(MeanFieldGuide {
        sites,
        train_mean: scheme.train_mean,
        train_sd: scheme.train_sd,
        max_sd,
    })
}

impl MeanFieldGuide {
    /// Rebuilds a guide from stored tensors (e.g. a checkpoint).
    pub fn from_sites(sites: Vec<GuideSite>, max_sd: Option<f64>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &sites {
            if !seen.insert(s.name.clone()) {
                return Err(Error::Contract(format!("duplicate guide site {:?}", s.name)));
            }
            if s.loc.shape() != s.rho.shape() {
                return Err(Error::Contract(format!("guide site {:?} loc/rho shapes differ", s.name)));
            }
        }
        let mut g = Self {
            sites,
            train_mean: true,
            train_sd: true,
            max_sd,
        };
        g.clamp();
        Ok(g)
    }

    pub fn sites(&self) -> &[GuideSite] {
        &self.sites
    }

    pub fn site(&self, name: &str) -> Option<&GuideSite> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub fn max_sd(&self) -> Option<f64> {
        self.max_sd
    }

    pub fn rho_bounds(&self) -> (f64, f64) {
        (SD_FLOOR.ln(), self.max_sd.map_or(f64::INFINITY, f64::ln))
    }

    /// Projects every `rho` into the admissible range.
    pub fn clamp(&mut self) {
        let (lo, hi) = self.rho_bounds();
        for s in &mut self.sites {
            s.rho.data_mut().iter_mut().for_each(|r| *r = r.clamp(lo, hi));
        }
    }

    pub fn distribution(&self, name: &str) -> Option<DiagonalNormal> {
        self.site(name)
            .map(|s| DiagonalNormal::new(s.loc.clone(), s.rho.map(f64::exp)).expect("clamped guide is valid"))
    }

    /// Reparameterized samples `loc + exp(rho) ∘ noise` for every site.
    pub fn sample_sites(&self, noise: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        self.sites
            .iter()
            .map(|s| {
                let eps = noise
                    .get(&s.name)
                    .ok_or_else(|| Error::Config(format!("no noise for site {:?}", s.name)))?;
                let d = self.distribution(&s.name).expect("own site");
                Ok((s.name.clone(), d.sample_reparameterized(eps)?))
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BTreeMap<String, Tensor> {
        let noise = self
            .sites
            .iter()
            .map(|s| (s.name.clone(), standard_normal(rng, s.loc.shape())))
            .collect();
        self.sample_sites(&noise).expect("noise covers all sites")
    }

    /// Closed-form `Σ_sites KL(q_site ‖ prior_site)`.
    pub fn guide_kl(&self, net: &Network) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.sites {
            let site = net
                .site(&s.name)
                .ok_or_else(|| Error::Contract(format!("guide site {:?} not in network", s.name)))?;
            let prior = site
                .prior()
                .ok_or_else(|| Error::Contract(format!("site {:?} is not bayesian", s.name)))?;
            let p = prior.as_normal().ok_or(Error::UnsupportedClosedForm {
                site: s.name.clone(),
                prior: prior.kind(),
            })?;
            total += kl_normal_normal(&self.distribution(&s.name).expect("own site"), p)?;
        }
        Ok(total)
    }

    /// Detached snapshot of every site's distribution.
    pub fn export_distributions(&self) -> BTreeMap<String, DiagonalNormal> {
        self.sites
            .iter()
            .map(|s| (s.name.clone(), self.distribution(&s.name).expect("own site")))
            .collect()
    }

    /// All guide tensors with their trainability, keyed `site.loc` / `site.rho`.
    pub fn parameters(&self) -> Vec<(String, Tensor, bool)> {
        let mut out = Vec::with_capacity(self.sites.len() * 2);
        for s in &self.sites {
            out.push((loc_name(&s.name), s.loc.clone(), self.train_mean));
            out.push((rho_name(&s.name), s.rho.clone(), self.train_sd));
        }
        out
    }

    /// Sets a `site.loc` or `site.rho` tensor. Returns `false` for names the
    /// guide does not own.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<bool> {
        for s in &mut self.sites {
            let slot = if name == loc_name(&s.name) {
                &mut s.loc
            } else if name == rho_name(&s.name) {
                &mut s.rho
            } else {
                continue;
            };
            if slot.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name:?} has shape {:?}, got {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn site_names(&self) -> BTreeSet<&str> {
        self.sites.iter().map(|s| s.name.as_str()).collect()
    }
}
