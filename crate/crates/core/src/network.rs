//! Sequential dense architectures and their named parameter sites.

use std::collections::BTreeMap;
use std::fmt;

use crate::distributions::SiteDistribution;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize, bias: bool) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Weight,
    Bias,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        })
    }
}

/// How a site enters the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Treatment {
    /// Inferred: carries a prior, values come from a guide or sampler.
    Bayesian { prior: SiteDistribution },
    /// Point estimate. With `map_prior` set, its log density penalizes the
    /// training objective (MAP); otherwise it is fit by maximum likelihood.
    Deterministic {
        value: Tensor,
        map_prior: Option<SiteDistribution>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSite {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub treatment: Treatment,
}

impl ParameterSite {
    pub fn is_bayesian(&self) -> bool {
        matches!(self.treatment, Treatment::Bayesian { .. })
    }

    pub fn prior(&self) -> Option<&SiteDistribution> {
        match &self.treatment {
            Treatment::Bayesian { prior } => Some(prior),
            Treatment::Deterministic { .. } => None,
        }
    }

    pub fn deterministic_value(&self) -> Option<&Tensor> {
        match &self.treatment {
            Treatment::Deterministic { value, .. } => Some(value),
            Treatment::Bayesian { .. } => None,
        }
    }
}

/// Inputs to one dense layer's linear map, handed to the interception hook.
pub struct DenseCall<'a> {
    pub layer: usize,
    pub input: Var,
    pub weight: &'a ParameterSite,
    pub bias: Option<&'a ParameterSite>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    sites: Vec<ParameterSite>,
}

fn deterministic_zero(shape: &[usize]) -> Treatment {
    Treatment::Deterministic {
        value: Tensor::zeros(shape),
        map_prior: None,
    }
}

impl Network {
    /// Builds the site list: `layer{i}.weight` (`out × in`) and, when the layer
    /// has one, `layer{i}.bias`. All sites start deterministic at zero until a
    /// prior is assigned.
    pub fn build(specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let mut sites = Vec::new();
        let mut width: Option<usize> = None;
        for (i, spec) in specs.iter().enumerate() {
            let LayerSpec::Dense {
                in_features,
                out_features,
                bias,
            } = *spec
            else {
                continue;
            };
            if in_features == 0 || out_features == 0 {
                return Err(Error::Config(format!("layer {i} has a zero-sized dimension")));
            }
            if let Some(w) = width {
                if w != in_features {
                    return Err(Error::Config(format!(
                        "dimension mismatch: layer {i} expects {in_features} inputs but the previous dense layer produces {w}"
                    )));
                }
            }
            width = Some(out_features);
            let shape = vec![out_features, in_features];
            sites.push(ParameterSite {
                name: format!("layer{i}.weight"),
                treatment: deterministic_zero(&shape),
                shape,
                role: Role::Weight,
                layer: i,
                fan_in: in_features,
                fan_out: out_features,
            });
            if bias {
                sites.push(ParameterSite {
                    name: format!("layer{i}.bias"),
                    shape: vec![out_features],
                    role: Role::Bias,
                    layer: i,
                    fan_in: in_features,
                    fan_out: out_features,
                    treatment: deterministic_zero(&[out_features]),
                });
            }
        }
        if width.is_none() {
            return Err(Error::Config("architecture has no dense layer".into()));
        }
        Ok(Self {
            layers: specs.to_vec(),
            sites,
        })
    }

    /// Parses the line-oriented architecture format:
    ///
    /// ```text
    /// dense 1 50 bias
    /// tanh
    /// dense 50 1 bias
    /// ```
    ///
    /// `dense IN OUT` without a trailing `bias` has no bias. Blank lines and
    /// `#` comments are ignored.
    pub fn parse_architecture(text: &str) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: &str| Error::Config(format!("architecture line {}: {detail}: {line:?}", lineno + 1));
            let words: Vec<&str> = line.split_whitespace().collect();
            let spec = match words.as_slice() {
                ["dense", i, o, rest @ ..] => {
                    let i: usize = i.parse().map_err(|_| bad("bad input width"))?;
                    let o: usize = o.parse().map_err(|_| bad("bad output width"))?;
                    let bias = match rest {
                        [] | ["nobias"] | ["no-bias"] => false,
                        ["bias"] => true,
                        _ => return Err(bad("expected `bias` or nothing after widths")),
                    };
                    LayerSpec::dense(i, o, bias)
                }
                ["tanh"] => LayerSpec::Activation(Activation::Tanh),
                ["relu"] => LayerSpec::Activation(Activation::Relu),
                ["identity"] => LayerSpec::Activation(Activation::Identity),
                _ => return Err(bad("unknown layer")),
            };
            specs.push(spec);
        }
        Ok(specs)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Sites in layer order, weight before bias.
    pub fn sites(&self) -> &[ParameterSite] {
        &self.sites
    }

    pub fn site(&self, name: &str) -> Option<&ParameterSite> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub(crate) fn sites_mut(&mut self) -> &mut [ParameterSite] {
        &mut self.sites
    }

    pub fn bayesian_sites(&self) -> impl Iterator<Item = &ParameterSite> {
        self.sites.iter().filter(|s| s.is_bayesian())
    }

    pub fn deterministic_sites(&self) -> impl Iterator<Item = &ParameterSite> {
        self.sites.iter().filter(|s| !s.is_bayesian())
    }

    /// Overwrites the value of a deterministic site.
    pub fn set_deterministic(&mut self, name: &str, value: Tensor) -> Result<()> {
        let site = self
            .sites
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown site {name:?}")))?;
        if site.shape != value.shape() {
            return Err(Error::Contract(format!(
                "site {name:?} has shape {:?}, got {:?}",
                site.shape,
                value.shape()
            )));
        }
        match &mut site.treatment {
            Treatment::Deterministic { value: v, .. } => {
                *v = value;
                Ok(())
            }
            Treatment::Bayesian { .. } => Err(Error::Contract(format!("site {name:?} is bayesian"))),
        }
    }

    pub fn input_width(&self) -> usize {
        self.sites[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.sites.last().expect("at least one dense layer").fan_out
    }

    /// Runs the layers in order inside `g`. Each dense layer's linear map is
    /// delegated to `dense`, which receives the layer input and its sites and
    /// returns the pre-activation; this is the single interception point used
    /// by the execution contexts.
    pub fn forward_graph<F>(&self, g: &mut Graph, input: Var, mut dense: F) -> Result<Var>
    where
        F: FnMut(&mut Graph, DenseCall<'_>) -> Result<Var>,
    {
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(Error::Dimension {
                op: "forward",
                node: input.index(),
                detail: format!("input {:?} but network expects width {}", shape, self.input_width()),
            });
        }
        let mut x = input;
        let mut site_iter = self.sites.iter().peekable();
        for (i, spec) in self.layers.iter().enumerate() {
            x = match spec {
                LayerSpec::Dense { .. } => {
                    let weight = site_iter.next().expect("site per dense layer");
                    let bias = match site_iter.peek() {
                        Some(s) if s.layer == i && s.role == Role::Bias => site_iter.next(),
                        _ => None,
                    };
                    dense(
                        g,
                        DenseCall {
                            layer: i,
                            input: x,
                            weight,
                            bias,
                        },
                    )?
                }
                LayerSpec::Activation(Activation::Tanh) => g.tanh(x)?,
                LayerSpec::Activation(Activation::Relu) => g.relu(x)?,
                LayerSpec::Activation(Activation::Identity) => x,
            };
        }
        Ok(x)
    }

    /// Deterministic forward pass with explicit values for every site.
    pub fn forward(&self, params: &BTreeMap<String, Tensor>, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let lookup = |g: &mut Graph, name: &str| -> Result<Var> {
            params
                .get(name)
                .map(|t| g.constant(t.clone()))
                .ok_or_else(|| Error::Config(format!("missing value for site {name:?}")))
        };
        let out = self.forward_graph(&mut g, x, |g, call| {
            let w = lookup(g, &call.weight.name)?;
            let b = call.bias.map(|b| lookup(g, &b.name)).transpose()?;
            dense_plain(g, call.input, w, b)
        })?;
        Ok(g.value(out).clone())
    }

    /// Current values of all deterministic sites.
    pub fn deterministic_values(&self) -> BTreeMap<String, Tensor> {
        self.sites
            .iter()
            .filter_map(|s| s.deterministic_value().map(|v| (s.name.clone(), v.clone())))
            .collect()
    }
}

/// `x · Wᵀ + b` with `W` stored `out × in` and `b` broadcast over the batch.
pub fn dense_plain(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let pre = g.matmul_t(x, w)?;
    match b {
        Some(b) => {
            let shape = g.shape(pre).to_vec();
            let bb = g.broadcast(b, &shape)?;
            g.add(pre, bb)
        }
        None => Ok(pre),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regression_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(1, 50, true),
            LayerSpec::Activation(Activation::Tanh),
            LayerSpec::dense(50, 1, true),
        ]
    }

    #[test]
    fn regression_net_sites() {
        let net = Network::build(&regression_specs()).unwrap();
        let names: Vec<&str> = net.sites().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["layer0.weight", "layer0.bias", "layer2.weight", "layer2.bias"]);
        assert_eq!(net.sites()[0].shape, vec![50, 1]);
        assert_eq!(net.sites()[1].shape, vec![50]);
        assert_eq!(net.sites()[2].shape, vec![1, 50]);
        assert_eq!(net.sites()[3].shape, vec![1]);
        assert_eq!(net.sites().to_vec(), Network::build(&regression_specs()).unwrap().sites().to_vec());
    }

    #[test]
    fn no_bias_layer() {
        let net = Network::build(&[LayerSpec::dense(3, 3, false)]).unwrap();
        assert_eq!(net.sites().len(), 1);
        assert_eq!((net.sites()[0].fan_in, net.sites()[0].fan_out), (3, 3));
    }

    #[test]
    fn dimension_mismatch() {
        let err = Network::build(&[LayerSpec::dense(2, 5, true), LayerSpec::dense(4, 1, true)]).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn forward_examples() {
        let net = Network::build(&[LayerSpec::dense(2, 2, true)]).unwrap();
        let mut p = BTreeMap::new();
        p.insert("layer0.weight".to_string(), Tensor::identity(2));
        p.insert("layer0.bias".to_string(), Tensor::zeros(&[2]));
        let x = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        assert_eq!(net.forward(&p, &x).unwrap().data(), &[1.0, -2.0]);

        let net = Network::build(&[LayerSpec::dense(1, 1, true)]).unwrap();
        let mut p = BTreeMap::new();
        p.insert("layer0.weight".to_string(), Tensor::matrix(1, 1, vec![2.0]).unwrap());
        p.insert("layer0.bias".to_string(), Tensor::vector(vec![1.0]));
        let x = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(net.forward(&p, &x).unwrap().data(), &[7.0]);

        let net = Network::build(&regression_specs()).unwrap();
        let zeros = net.deterministic_values();
        let x = Tensor::matrix(3, 1, vec![-1.0, 0.2, 0.9]).unwrap();
        assert_eq!(net.forward(&zeros, &x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_errors() {
        let net = Network::build(&[LayerSpec::dense(2, 1, true)]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(net.forward(&BTreeMap::new(), &x).is_err());
        let bad = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            net.forward(&net.deterministic_values(), &bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn parses_architecture_text() {
        let specs = Network::parse_architecture("dense 1 50 bias\ntanh\n# comment\n\ndense 50 1 bias\n").unwrap();
        assert_eq!(specs, regression_specs());
        assert_eq!(
            Network::parse_architecture("dense 3 3").unwrap(),
            vec![LayerSpec::dense(3, 3, false)]
        );
        assert!(Network::parse_architecture("conv 3 3").is_err());
        assert!(Network::parse_architecture("dense x 3").is_err());
    }
}
