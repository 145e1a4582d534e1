//! Validated run configuration. Every default is resolved here so the echo in
//! `metrics.json` states exactly what ran.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bnn_core::distributions::DiagonalNormal;
use bnn_core::guides::DEFAULT_INIT_SD;
use bnn_core::likelihoods::LikelihoodKind;
use bnn_core::mcmc::{HmcConfig, Kernel};
use bnn_core::priors::{LayerwiseMethod, PriorSpec, ScalarPrior};
use bnn_core::svi::ExecutionContext;
use bnn_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::args::{Command, CommonArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Regress,
    Classify,
    Vcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inference {
    Ml,
    Map,
    MeanField,
    Hmc,
}

impl FromStr for Inference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(Self::Ml),
            "map" => Ok(Self::Map),
            "mean-field" => Ok(Self::MeanField),
            "hmc" => Ok(Self::Hmc),
            other => Err(Error::Config(format!("unknown inference {other:?} (ml, map, mean-field, hmc)"))),
        }
    }
}

impl fmt::Display for Inference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ml => "ml",
            Self::Map => "map",
            Self::MeanField => "mean-field",
            Self::Hmc => "hmc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSettings {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub num_samples: usize,
    pub kernel: String,
}

impl HmcSettings {
    pub fn to_config(&self) -> Result<HmcConfig> {
        Ok(HmcConfig {
            step_size: self.step_size,
            leapfrog_steps: self.leapfrog_steps,
            warmup: self.warmup,
            num_samples: self.num_samples,
            kernel: self.kernel.parse::<Kernel>()?,
            ..HmcConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSettings {
    pub init_sd: f64,
    pub max_sd: Option<f64>,
    pub fix_mean: bool,
    pub mean_init: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VclSettings {
    pub tasks: usize,
    pub split: String,
    pub task_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub inference: Inference,
    pub context: Option<String>,
    pub architecture: Option<String>,
    pub prior: String,
    pub likelihood: String,
    pub guide: Option<GuideSettings>,
    pub hide: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: Option<usize>,
    pub num_samples: usize,
    pub seed: u64,
    pub data: Option<String>,
    pub target_column: String,
    pub hmc: Option<HmcSettings>,
    pub vcl: Option<VclSettings>,
    pub resumed: bool,
    #[serde(skip)]
    pub output: PathBuf,
    #[serde(skip)]
    pub resume: Option<PathBuf>,
}

pub const DEFAULT_EPOCHS: usize = 1000;
pub const DEFAULT_VCL_EPOCHS: usize = 300;
pub const DEFAULT_VCL_BATCH: usize = 50;

fn reject(flag: &str, inference: Inference) -> Error {
    Error::Config(format!("--{flag} is not valid with --inference {inference}"))
}

impl RunConfig {
    pub fn from_command(cmd: &Command) -> Result<Self> {
        let (kind, a, vcl) = match cmd {
            Command::Regress(a) => (CommandKind::Regress, a, None),
            Command::Classify(a) => (CommandKind::Classify, a, None),
            Command::Vcl(v) => (
                CommandKind::Vcl,
                &v.common,
                Some(VclSettings {
                    tasks: v.tasks,
                    split: v.split.clone(),
                    task_size: v.task_size,
                }),
            ),
        };
        Self::build(kind, a, vcl)
    }

    fn build(command: CommandKind, a: &CommonArgs, vcl: Option<VclSettings>) -> Result<Self> {
        let inference: Inference = a.inference.parse()?;
        let hmc_flags = [
            ("step-size", a.step_size.is_some()),
            ("leapfrog-steps", a.leapfrog_steps.is_some()),
            ("warmup", a.warmup.is_some()),
            ("hmc-samples", a.hmc_samples.is_some()),
            ("kernel", a.kernel.is_some()),
        ];
        let guide_flags = [
            ("init-sd", a.init_sd.is_some()),
            ("max-sd", a.max_sd.is_some()),
            ("fix-mean", a.fix_mean),
            ("mean-init", a.mean_init.is_some()),
        ];
        if inference != Inference::Hmc {
            if let Some((flag, _)) = hmc_flags.iter().find(|f| f.1) {
                return Err(reject(flag, inference));
            }
        }
        if inference != Inference::MeanField {
            if let Some((flag, _)) = guide_flags.iter().find(|f| f.1) {
                return Err(reject(flag, inference));
            }
        }
        if inference == Inference::Hmc {
            if a.context.is_some() {
                return Err(reject("context", inference));
            }
            if a.resume.is_some() {
                return Err(reject("resume", inference));
            }
            if command == CommandKind::Vcl {
                return Err(Error::Config("vcl needs variational or point-estimate inference".into()));
            }
        }
        if command == CommandKind::Vcl && a.data.is_some() {
            return Err(Error::Config("vcl generates its own tasks; --data is not valid".into()));
        }
        if let Some(c) = &a.context {
            c.parse::<ExecutionContext>()?;
        }
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", a.lr)));
        }
        if a.num_samples == 0 {
            return Err(Error::Config("--num-samples must be at least 1".into()));
        }
        if a.batch_size == Some(0) {
            return Err(Error::Config("--batch-size must be at least 1".into()));
        }
        let likelihood = a.likelihood.clone().unwrap_or_else(|| {
            match command {
                CommandKind::Regress => "gaussian:sd=0.1",
                CommandKind::Classify | CommandKind::Vcl => "categorical",
            }
            .to_string()
        });
        likelihood.parse::<LikelihoodKind>()?;
        parse_prior(&a.prior)?;
        let architecture = a
            .arch
            .as_ref()
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display()))))
            .transpose()?;
        let guide = (inference == Inference::MeanField).then(|| GuideSettings {
            init_sd: a.init_sd.unwrap_or(DEFAULT_INIT_SD),
            max_sd: a.max_sd,
            fix_mean: a.fix_mean,
            mean_init: a.mean_init.clone().unwrap_or_else(|| "layer-scaled".into()),
        });
        if let Some(g) = &guide {
            if !matches!(g.mean_init.as_str(), "layer-scaled" | "sample-prior") {
                return Err(Error::Config(format!("unknown mean init {:?}", g.mean_init)));
            }
        }
        let hmc = (inference == Inference::Hmc).then(|| {
            let d = HmcConfig::default();
            HmcSettings {
                step_size: a.step_size.unwrap_or(d.step_size),
                leapfrog_steps: a.leapfrog_steps.unwrap_or(d.leapfrog_steps),
                warmup: a.warmup.unwrap_or(d.warmup),
                num_samples: a.hmc_samples.unwrap_or(d.num_samples),
                kernel: a.kernel.clone().unwrap_or_else(|| d.kernel.to_string()),
            }
        });
        if let Some(h) = &hmc {
            h.to_config()?;
        }
        let (epochs, batch_size) = match command {
            CommandKind::Vcl => (
                a.epochs.unwrap_or(DEFAULT_VCL_EPOCHS),
                Some(a.batch_size.unwrap_or(DEFAULT_VCL_BATCH)),
            ),
            _ => (a.epochs.unwrap_or(DEFAULT_EPOCHS), a.batch_size),
        };
        if epochs == 0 && inference != Inference::Hmc {
            return Err(Error::Config("--epochs must be at least 1".into()));
        }
        let data = match command {
            CommandKind::Vcl => None,
            CommandKind::Regress => Some(a.data.clone().unwrap_or_else(|| "toy".into())),
            CommandKind::Classify => Some(a.data.clone().unwrap_or_else(|| "blobs".into())),
        };
        Ok(Self {
            command,
            inference,
            context: (inference != Inference::Hmc)
                .then(|| a.context.clone().unwrap_or_else(|| "plain".into())),
            architecture,
            prior: a.prior.clone(),
            likelihood,
            guide,
            hide: a.hide.clone(),
            epochs,
            lr: a.lr,
            batch_size,
            num_samples: a.num_samples,
            seed: a.seed,
            data,
            target_column: a.target_column.clone(),
            hmc,
            vcl,
            resumed: a.resume.is_some(),
            output: a.output.clone(),
            resume: a.resume.clone(),
        })
    }

    pub fn execution_context(&self) -> ExecutionContext {
        self.context
            .as_deref()
            .map(|c| c.parse().expect("validated"))
            .unwrap_or_default()
    }
}

#[derive(Deserialize)]
struct DictEntry {
    mean: Tensor,
    sd: Tensor,
}

fn number(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Config(format!("bad number for {key}: {v:?}")))
}

/// `iid:sd=S`, `iid:laplace=B`, `layerwise:method=M` or `dict:@FILE.json`.
/// Dict files map site names to `{"mean": T, "sd": T}` with tensors
/// serialized as `{"shape": [...], "data": [...]}`.
pub fn parse_prior(text: &str) -> Result<PriorSpec> {
    let (kind, rest) = text
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("bad prior {text:?}")))?;
    match kind {
        "iid" => {
            if let Some(v) = rest.strip_prefix("sd=") {
                let sd = number("sd", v)?;
                if sd <= 0.0 {
                    return Err(Error::Config("prior sd must be positive".into()));
                }
                Ok(PriorSpec::Iid(ScalarPrior::Normal { mean: 0.0, sd }))
            } else if let Some(v) = rest.strip_prefix("laplace=") {
                let scale = number("laplace", v)?;
                if scale <= 0.0 {
                    return Err(Error::Config("laplace scale must be positive".into()));
                }
                Ok(PriorSpec::Iid(ScalarPrior::Laplace { loc: 0.0, scale }))
            } else {
                Err(Error::Config(format!("bad iid prior {text:?}")))
            }
        }
        "layerwise" => {
            let m = rest
                .strip_prefix("method=")
                .ok_or_else(|| Error::Config(format!("bad layerwise prior {text:?}")))?;
            Ok(PriorSpec::LayerwiseNormal(m.parse::<LayerwiseMethod>()?))
        }
        "dict" => {
            let path = rest
                .strip_prefix('@')
                .ok_or_else(|| Error::Config(format!("dict prior needs @FILE, got {text:?}")))?;
            load_dict_prior(Path::new(path))
        }
        _ => Err(Error::Config(format!("unknown prior {text:?}"))),
    }
}

fn load_dict_prior(path: &Path) -> Result<PriorSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, DictEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (name, e) in raw {
        let mean = Tensor::new(e.mean.shape().to_vec(), e.mean.data().to_vec())?;
        let sd = Tensor::new(e.sd.shape().to_vec(), e.sd.data().to_vec())?;
        map.insert(name, DiagonalNormal::new(mean, sd)?);
    }
    Ok(PriorSpec::Dict(map))
}
