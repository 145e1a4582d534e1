//! Prior assignment over parameter sites, with hide/expose filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::distributions::{standard_normal, DiagonalNormal, Laplace, SiteDistribution};
use crate::error::{Error, Result};
use crate::network::{Network, ParameterSite, Role, Treatment};
use crate::tensor::Tensor;

/// Variance schemes for [`PriorSpec::LayerwiseNormal`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerwiseMethod {
    /// `1 / fan_in`
    Radford,
    /// `2 / (fan_in + fan_out)`
    Xavier,
    /// `2 / fan_in`
    Kaiming,
}

impl FromStr for LayerwiseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radford" => Ok(Self::Radford),
            "xavier" => Ok(Self::Xavier),
            "kaiming" => Ok(Self::Kaiming),
            other => Err(Error::Config(format!(
                "unknown layerwise method {other:?} (expected radford, xavier or kaiming)"
            ))),
        }
    }
}

impl fmt::Display for LayerwiseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Radford => "radford",
            Self::Xavier => "xavier",
            Self::Kaiming => "kaiming",
        })
    }
}

pub fn layerwise_variance(method: LayerwiseMethod, fan_in: usize, fan_out: usize) -> Result<f64> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Contract("fan_in and fan_out must be at least 1".into()));
    }
    let (fi, fo) = (fan_in as f64, fan_out as f64);
    Ok(match method {
        LayerwiseMethod::Radford => 1.0 / fi,
        LayerwiseMethod::Kaiming => 2.0 / fi,
        LayerwiseMethod::Xavier => 2.0 / (fi + fo),
    })
}

/// Scalar distribution replicated i.i.d. over every element of a site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarPrior {
    Normal { mean: f64, sd: f64 },
    Laplace { loc: f64, scale: f64 },
}

impl ScalarPrior {
    pub fn broadcast(&self, shape: &[usize]) -> Result<SiteDistribution> {
        Ok(match *self {
            ScalarPrior::Normal { mean, sd } => DiagonalNormal::iid(mean, sd, shape)?.into(),
            ScalarPrior::Laplace { loc, scale } => SiteDistribution::Laplace(Laplace::iid(loc, scale, shape)?),
        })
    }
}

pub type LambdaPrior = dyn Fn(&ParameterSite) -> SiteDistribution + Send + Sync;

pub enum PriorSpec {
    Iid(ScalarPrior),
    LayerwiseNormal(LayerwiseMethod),
    Dict(BTreeMap<String, DiagonalNormal>),
    Lambda(Box<LambdaPrior>),
}

impl fmt::Debug for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::Iid(p) => write!(f, "Iid({p:?})"),
            PriorSpec::LayerwiseNormal(m) => write!(f, "LayerwiseNormal({m})"),
            PriorSpec::Dict(d) => write!(f, "Dict({:?})", d.keys().collect::<Vec<_>>()),
            PriorSpec::Lambda(_) => f.write_str("Lambda(..)"),
        }
    }
}

impl PriorSpec {
    pub fn standard_normal() -> Self {
        PriorSpec::Iid(ScalarPrior::Normal { mean: 0.0, sd: 1.0 })
    }

    fn resolve(&self, site: &ParameterSite) -> Result<SiteDistribution> {
        let dist = match self {
            PriorSpec::Iid(p) => p.broadcast(&site.shape)?,
            PriorSpec::LayerwiseNormal(method) => {
                let var = layerwise_variance(*method, site.fan_in, site.fan_out)?;
                DiagonalNormal::iid(0.0, var.sqrt(), &site.shape)?.into()
            }
            PriorSpec::Dict(map) => map
                .get(&site.name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("dict prior has no entry for site {:?}", site.name)))?
                .into(),
            PriorSpec::Lambda(f) => f(site),
        };
        if dist.shape() != site.shape.as_slice() {
            return Err(Error::Contract(format!(
                "prior for {:?} has shape {:?}, site has {:?}",
                site.name,
                dist.shape(),
                site.shape
            )));
        }
        Ok(dist)
    }
}

/// Which sites stay deterministic.
///
/// Entries match a site by full name (`layer2.weight`) or by layer prefix
/// (`layer2`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteFilter {
    pub hide_names: BTreeSet<String>,
    pub hide_roles: BTreeSet<Role>,
    /// When set, only matching sites are Bayesian.
    pub expose_names: Option<BTreeSet<String>>,
}

fn matches_entry(entry: &str, name: &str) -> bool {
    name == entry || name.strip_prefix(entry).is_some_and(|rest| rest.starts_with('.'))
}

impl SiteFilter {
    pub fn all() -> Self {
        Self::default()
    }

    /// Everything deterministic.
    pub fn none() -> Self {
        Self {
            expose_names: Some(BTreeSet::new()),
            ..Self::default()
        }
    }

    pub fn hide_role(mut self, role: Role) -> Self {
        self.hide_roles.insert(role);
        self
    }

    pub fn hide(mut self, name: &str) -> Self {
        self.hide_names.insert(name.to_string());
        self
    }

    pub fn expose(mut self, name: &str) -> Self {
        self.expose_names.get_or_insert_with(BTreeSet::new).insert(name.to_string());
        self
    }

    fn validate(&self) -> Result<()> {
        if let Some(expose) = &self.expose_names {
            if let Some(both) = expose.intersection(&self.hide_names).next() {
                return Err(Error::Config(format!("site {both:?} is both hidden and exposed")));
            }
        }
        Ok(())
    }

    pub fn is_exposed(&self, site: &ParameterSite) -> bool {
        if self.hide_roles.contains(&site.role) || self.hide_names.iter().any(|e| matches_entry(e, &site.name)) {
            return false;
        }
        match &self.expose_names {
            Some(set) => set.iter().any(|e| matches_entry(e, &site.name)),
            None => true,
        }
    }
}

/// Standard initialization for point-estimated sites: `N(0, 1/fan_in)` for
/// weights, zeros for biases.
pub fn initial_point_value<R: Rng + ?Sized>(site: &ParameterSite, rng: &mut R) -> Tensor {
    match site.role {
        Role::Weight => standard_normal(rng, &site.shape).map(|e| e / (site.fan_in as f64).sqrt()),
        Role::Bias => Tensor::zeros(&site.shape),
    }
}

/// Makes exposed sites Bayesian under `spec` and hidden sites deterministic.
/// Hidden sites are freshly initialized from `rng` (in site order).
pub fn assign_priors<R: Rng + ?Sized>(
    net: &Network,
    spec: &PriorSpec,
    filter: &SiteFilter,
    rng: &mut R,
) -> Result<Network> {
    filter.validate()?;
    let mut out = net.clone();
    for site in out.sites_mut() {
        site.treatment = if filter.is_exposed(site) {
            Treatment::Bayesian {
                prior: spec.resolve(site)?,
            }
        } else {
            Treatment::Deterministic {
                value: initial_point_value(site, rng),
                map_prior: None,
            }
        };
    }
    Ok(out)
}

/// Replaces the priors of all Bayesian sites. `new` must name exactly the
/// Bayesian sites.
pub fn update_priors(net: &Network, new: &BTreeMap<String, DiagonalNormal>) -> Result<Network> {
    let bayesian: BTreeSet<&str> = net.bayesian_sites().map(|s| s.name.as_str()).collect();
    let given: BTreeSet<&str> = new.keys().map(String::as_str).collect();
    if let Some(missing) = bayesian.difference(&given).next() {
        return Err(Error::Config(format!("prior update is missing site {missing:?}")));
    }
    if let Some(unknown) = given.difference(&bayesian).next() {
        return Err(Error::Config(format!("prior update names unknown or deterministic site {unknown:?}")));
    }
    let mut out = net.clone();
    for site in out.sites_mut() {
        if let Treatment::Bayesian { prior } = &mut site.treatment {
            let d = &new[&site.name];
            if d.shape() != site.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "prior update for {:?} has shape {:?}",
                    site.name,
                    d.shape()
                )));
            }
            *prior = d.clone().into();
        }
    }
    Ok(out)
}

/// Converts every Bayesian site to a point estimate. With `keep_prior_as_penalty`
/// the former prior becomes the MAP penalty; otherwise the site is fit by
/// maximum likelihood.
pub fn to_point_estimates<R: Rng + ?Sized>(net: &Network, keep_prior_as_penalty: bool, rng: &mut R) -> Network {
    let mut out = net.clone();
    for site in out.sites_mut() {
        if let Treatment::Bayesian { prior } = &site.treatment {
            let map_prior = keep_prior_as_penalty.then(|| prior.clone());
            site.treatment = Treatment::Deterministic {
                value: initial_point_value(site, rng),
                map_prior,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn regression_net() -> Network {
        Network::build(&[
            LayerSpec::dense(1, 50, true),
            LayerSpec::Activation(Activation::Tanh),
            LayerSpec::dense(50, 1, true),
        ])
        .unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn layerwise_variances() {
        assert_eq!(layerwise_variance(LayerwiseMethod::Radford, 4, 9).unwrap(), 0.25);
        assert_eq!(layerwise_variance(LayerwiseMethod::Kaiming, 4, 9).unwrap(), 0.5);
        assert_eq!(layerwise_variance(LayerwiseMethod::Xavier, 4, 4).unwrap(), 0.25);
        assert!("gaussian".parse::<LayerwiseMethod>().is_err());
    }

    #[test]
    fn iid_unit_normal_everywhere() {
        let net = assign_priors(&regression_net(), &PriorSpec::standard_normal(), &SiteFilter::all(), &mut rng()).unwrap();
        assert_eq!(net.bayesian_sites().count(), 4);
        for s in net.sites() {
            let p = s.prior().unwrap().as_normal().unwrap();
            assert!(p.mean().data().iter().all(|&m| m == 0.0));
            assert!(p.sd().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn layerwise_radford_output_layer() {
        let net = assign_priors(
            &regression_net(),
            &PriorSpec::LayerwiseNormal(LayerwiseMethod::Radford),
            &SiteFilter::all(),
            &mut rng(),
        )
        .unwrap();
        let sd = net.site("layer2.weight").unwrap().prior().unwrap().as_normal().unwrap().sd().data()[0];
        assert!((sd - (1.0f64 / 50.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hidden_biases_are_deterministic() {
        let filter = SiteFilter::all().hide_role(Role::Bias);
        let net = assign_priors(&regression_net(), &PriorSpec::standard_normal(), &filter, &mut rng()).unwrap();
        for s in net.sites() {
            assert_eq!(s.is_bayesian(), s.role == Role::Weight, "{}", s.name);
        }
        assert_eq!(net.site("layer0.bias").unwrap().deterministic_value().unwrap(), &Tensor::zeros(&[50]));
    }

    #[test]
    fn hide_wins_over_spec_and_prefix_matching() {
        let filter = SiteFilter::all().hide("layer0");
        let mut map = BTreeMap::new();
        map.insert("layer2.weight".into(), DiagonalNormal::standard(&[1, 50]));
        map.insert("layer2.bias".into(), DiagonalNormal::standard(&[1]));
        let net = assign_priors(&regression_net(), &PriorSpec::Dict(map), &filter, &mut rng()).unwrap();
        assert!(!net.site("layer0.weight").unwrap().is_bayesian());
        assert!(net.site("layer2.bias").unwrap().is_bayesian());

        let only_last = SiteFilter::all().expose("layer2");
        let net = assign_priors(&regression_net(), &PriorSpec::standard_normal(), &only_last, &mut rng()).unwrap();
        let names: Vec<_> = net.bayesian_sites().map(|s| s.name.clone()).collect();
        assert_eq!(names, ["layer2.weight", "layer2.bias"]);

        let clash = SiteFilter::all().hide("layer2.bias").expose("layer2.bias");
        assert!(assign_priors(&regression_net(), &PriorSpec::standard_normal(), &clash, &mut rng()).is_err());
    }

    #[test]
    fn dict_missing_site_and_bad_lambda() {
        let mut map = BTreeMap::new();
        map.insert("layer0.weight".into(), DiagonalNormal::standard(&[50, 1]));
        assert!(assign_priors(&regression_net(), &PriorSpec::Dict(map), &SiteFilter::all(), &mut rng()).is_err());

        let bad = PriorSpec::Lambda(Box::new(|_| DiagonalNormal::standard(&[2]).into()));
        assert!(assign_priors(&regression_net(), &bad, &SiteFilter::all(), &mut rng()).is_err());

        let ok = PriorSpec::Lambda(Box::new(|s| DiagonalNormal::iid(0.0, 1.0 / s.fan_in as f64, &s.shape).unwrap().into()));
        assert!(assign_priors(&regression_net(), &ok, &SiteFilter::all(), &mut rng()).is_ok());
    }

    #[test]
    fn update_priors_coverage() {
        let net = assign_priors(&regression_net(), &PriorSpec::standard_normal(), &SiteFilter::all(), &mut rng()).unwrap();
        let same: BTreeMap<String, DiagonalNormal> = net
            .sites()
            .iter()
            .map(|s| (s.name.clone(), s.prior().unwrap().as_normal().unwrap().clone()))
            .collect();
        assert_eq!(update_priors(&net, &same).unwrap(), net);

        let mut partial = same.clone();
        partial.remove("layer2.bias");
        assert!(update_priors(&net, &partial).is_err());

        let mut extra = same;
        extra.insert("layer9.weight".into(), DiagonalNormal::standard(&[1]));
        assert!(update_priors(&net, &extra).is_err());
    }

    #[test]
    fn point_estimates_keep_site_set() {
        let net = assign_priors(&regression_net(), &PriorSpec::standard_normal(), &SiteFilter::all(), &mut rng()).unwrap();
        let map = to_point_estimates(&net, true, &mut rng());
        assert_eq!(map.sites().len(), net.sites().len());
        assert!(map.sites().iter().all(|s| matches!(
            &s.treatment,
            Treatment::Deterministic { map_prior: Some(_), .. }
        )));
        let ml = to_point_estimates(&net, false, &mut rng());
        assert!(ml.sites().iter().all(|s| matches!(
            &s.treatment,
            Treatment::Deterministic { map_prior: None, .. }
        )));
    }
}
