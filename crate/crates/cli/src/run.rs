//! Executes a validated [`RunConfig`] and writes its outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use bnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use bnn_core::data::{gen_split_tasks, gen_toy_regression, load_csv, Dataset, SplitKind, Task};
use bnn_core::guides::{init_guide, InitScheme, MeanFieldGuide, MeanInit};
use bnn_core::likelihoods::{Aggregated, Likelihood, LikelihoodKind};
use bnn_core::mcmc::{hmc_sample, predict_aggregated};
use bnn_core::metrics::{ece, entropy_ecdf, ood_auroc, DEFAULT_BINS};
use bnn_core::network::{Activation, LayerSpec, Network, Role};
use bnn_core::priors::{assign_priors, to_point_estimates, SiteFilter};
use bnn_core::svi::{stream_rng, Adam, FitOptions, VariationalBnn};
use bnn_core::vcl::{run_task_sequence, VclConfig};
use bnn_core::{Error, Result, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_prior, CommandKind, Inference, RunConfig};
use crate::output::{self, Metrics, Results};

pub const TOY_POINTS_PER_CLUSTER: usize = 50;
pub const BUILTIN_TASK_SIZE: usize = 200;
pub const GRID_POINTS: usize = 201;
pub const GRID_RANGE: (f64, f64) = (-1.5, 1.5);

/// Stream of the run seed reserved for initialization; epochs use streams
/// from 0 upward.
const INIT_STREAM: u64 = u64::MAX;

fn predict_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

struct Data {
    train: Dataset,
    test: Dataset,
    ood: Option<Dataset>,
    toy: bool,
}

fn builtin_split(name: &str) -> Option<SplitKind> {
    match name {
        "blobs" => Some(SplitKind::GaussianBlobs),
        "moons" => Some(SplitKind::TwoMoonsRotations),
        _ => None,
    }
}

/// CSV files are split deterministically: a seeded shuffle, the last fifth
/// held out for testing.
fn split_csv(all: Dataset, seed: u64) -> Data {
    use rand::seq::SliceRandom;
    let n = all.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, INIT_STREAM - 1));
    let n_test = if n >= 5 { n / 5 } else { 0 };
    let (train_idx, test_idx) = idx.split_at(n - n_test);
    let train = all.select(train_idx);
    let test = if n_test == 0 { train.clone() } else { all.select(test_idx) };
    Data {
        train,
        test,
        ood: None,
        toy: false,
    }
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let source = cfg.data.as_deref().expect("non-vcl runs have a data source");
    match (cfg.command, source) {
        (CommandKind::Regress, "toy") => Ok(Data {
            train: gen_toy_regression(TOY_POINTS_PER_CLUSTER, cfg.seed)?,
            test: gen_toy_regression(TOY_POINTS_PER_CLUSTER, cfg.seed.wrapping_add(1))?,
            ood: None,
            toy: true,
        }),
        (CommandKind::Classify, name) if builtin_split(name).is_some() => {
            let kind = builtin_split(name).expect("checked");
            let mut tasks = gen_split_tasks(kind, 2, BUILTIN_TASK_SIZE, cfg.seed)?.into_iter();
            let Task { train, test } = tasks.next().expect("two tasks");
            let ood = tasks.next().expect("two tasks").test;
            Ok(Data {
                train,
                test,
                ood: Some(ood),
                toy: false,
            })
        }
        (_, path) => Ok(split_csv(load_csv(Path::new(path), &cfg.target_column)?, cfg.seed)),
    }
}

fn likelihood_kind(cfg: &RunConfig) -> LikelihoodKind {
    cfg.likelihood.parse().expect("validated")
}

fn output_width(kind: LikelihoodKind, data: &Dataset) -> usize {
    match kind {
        LikelihoodKind::Categorical => data.num_classes().max(2),
        LikelihoodKind::HeteroskedasticGaussian => 2 * data.targets.cols(),
        _ => data.targets.cols(),
    }
}

fn architecture(cfg: &RunConfig, input: usize, output: usize) -> Result<Vec<LayerSpec>> {
    if let Some(text) = &cfg.architecture {
        return Network::parse_architecture(text);
    }
    let (hidden, act) = match cfg.command {
        CommandKind::Regress => (50, Activation::Tanh),
        CommandKind::Classify | CommandKind::Vcl => (32, Activation::Relu),
    };
    Ok(vec![
        LayerSpec::dense(input, hidden, true),
        LayerSpec::Activation(act),
        LayerSpec::dense(hidden, output, true),
    ])
}

fn site_filter(cfg: &RunConfig, net: &Network) -> Result<SiteFilter> {
    let mut filter = SiteFilter::all();
    for entry in &cfg.hide {
        filter = match entry.as_str() {
            "weight" => filter.hide_role(Role::Weight),
            "bias" => filter.hide_role(Role::Bias),
            name => {
                let known = net
                    .sites()
                    .iter()
                    .any(|s| s.name == name || s.name.strip_prefix(name).is_some_and(|r| r.starts_with('.')));
                if !known {
                    return Err(Error::Config(format!("--hide {name:?} matches no parameter site")));
                }
                filter.hide(name)
            }
        };
    }
    Ok(filter)
}

/// Network with priors and treatments, plus a guide (empty for ML/MAP).
fn build_model(cfg: &RunConfig, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<(Network, MeanFieldGuide)> {
    let net = Network::build(specs)?;
    let filter = site_filter(cfg, &net)?;
    let net = assign_priors(&net, &parse_prior(&cfg.prior)?, &filter, rng)?;
    match cfg.inference {
        Inference::Ml | Inference::Map => {
            let net = to_point_estimates(&net, cfg.inference == Inference::Map, rng);
            Ok((net, MeanFieldGuide::from_sites(Vec::new(), None)?))
        }
        Inference::MeanField => {
            let g = cfg.guide.as_ref().expect("mean-field has guide settings");
            let scheme = InitScheme {
                mean_init: match g.mean_init.as_str() {
                    "sample-prior" => MeanInit::SamplePrior,
                    _ => MeanInit::LayerScaled,
                },
                sd_init: g.init_sd,
                train_mean: !g.fix_mean,
                train_sd: true,
            };
            let guide = init_guide(&net, &scheme, g.max_sd, rng)?;
            Ok((net, guide))
        }
        Inference::Hmc => Ok((net, MeanFieldGuide::from_sites(Vec::new(), None)?)),
    }
}

fn check_widths(net: &Network, input: usize, output: usize) -> Result<()> {
    if net.input_width() != input || net.output_width() != output {
        return Err(Error::Config(format!(
            "architecture maps {} inputs to {} outputs; the data needs {input} to {output}",
            net.input_width(),
            net.output_width()
        )));
    }
    Ok(())
}

fn grid_inputs() -> (Vec<f64>, Tensor) {
    let (lo, hi) = GRID_RANGE;
    let xs: Vec<f64> = (0..GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let t = Tensor::matrix(GRID_POINTS, 1, xs.clone()).expect("column");
    (xs, t)
}

fn labels(targets: &Tensor) -> Vec<usize> {
    targets.data().iter().map(|&v| v as usize).collect()
}

/// Classification summaries shared by all inference modes. Writes the
/// calibration and entropy files.
fn classification_extras(
    out: &Path,
    results: &mut Results,
    aggregated: &Aggregated,
    targets: &Tensor,
    ood: Option<&Aggregated>,
) -> Result<()> {
    let Aggregated::Probabilities(p) = aggregated else {
        return Ok(());
    };
    let probs = output::class_probabilities(p);
    results.accuracy = Some(1.0 - results.error);
    let report = ece(&probs, &labels(targets), DEFAULT_BINS)?;
    results.ece = Some(report.ece);
    output::write_text(&out.join("calibration.csv"), &output::calibration_csv(&report)?)?;
    output::write_text(&out.join("entropy_ecdf.csv"), &output::ecdf_csv(&entropy_ecdf(&probs)?))?;
    if let Some(Aggregated::Probabilities(q)) = ood {
        results.ood_auroc = Some(ood_auroc(&probs, &output::class_probabilities(q))?);
    }
    Ok(())
}

fn adam_records(adam: &Adam) -> Vec<(String, Tensor)> {
    let mut recs: Vec<(String, Tensor)> = adam.m.iter().map(|(k, v)| (format!("adam.m.{k}"), v.clone())).collect();
    recs.extend(adam.v.iter().map(|(k, v)| (format!("adam.v.{k}"), v.clone())));
    recs.push(("adam.step".into(), Tensor::scalar(adam.step as f64)));
    recs
}

fn param_records(bnn: &VariationalBnn) -> Vec<(String, Tensor)> {
    bnn.parameters().into_iter().map(|(k, v, _)| (format!("param.{k}"), v)).collect()
}

/// Restores parameters and optimizer state; returns the number of epochs
/// already completed.
fn restore(path: &Path, bnn: &mut VariationalBnn, adam: &mut Adam) -> Result<usize> {
    let records: BTreeMap<String, Tensor> = load_checkpoint(path)?.into_iter().collect();
    let expected: Vec<String> = bnn.parameters().into_iter().map(|(k, _, _)| k).collect();
    let mismatch = |what: String| Error::Config(format!("checkpoint {} does not fit this model: {what}", path.display()));
    for name in &expected {
        let t = records.get(&format!("param.{name}")).ok_or_else(|| mismatch(format!("missing {name}")))?;
        bnn.set_parameter(name, t.clone()).map_err(|e| mismatch(e.to_string()))?;
    }
    for (key, t) in &records {
        if let Some(name) = key.strip_prefix("param.") {
            if !expected.iter().any(|e| e == name) {
                return Err(mismatch(format!("unknown parameter {name}")));
            }
        } else if let Some(name) = key.strip_prefix("adam.m.") {
            adam.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = key.strip_prefix("adam.v.") {
            adam.v.insert(name.to_string(), t.clone());
        }
    }
    let scalar = |key: &str| -> Result<f64> {
        records
            .get(key)
            .filter(|t| t.len() == 1)
            .map(|t| t.data()[0])
            .ok_or_else(|| mismatch(format!("missing {key}")))
    };
    adam.step = scalar("adam.step")? as u64;
    Ok(scalar("meta.epochs_done")? as usize)
}

/// Runs the configured experiment, writes all files and returns the metrics.
pub fn run(cfg: &RunConfig) -> Result<Metrics> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::Io(format!("{}: {e}", cfg.output.display())))?;
    let (specs, results) = match (cfg.command, cfg.inference) {
        (CommandKind::Vcl, _) => run_vcl(cfg)?,
        (_, Inference::Hmc) => run_hmc(cfg)?,
        _ => run_svi(cfg)?,
    };
    let metrics = Metrics {
        run_id: output::run_id(cfg),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        command: cfg.command,
        config: cfg.clone(),
        architecture: output::render_architecture(&specs),
        results,
    };
    output::write_json(&cfg.output.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn prepare(cfg: &RunConfig, data: &Data) -> Result<(Vec<LayerSpec>, Network, MeanFieldGuide, Likelihood)> {
    let kind = likelihood_kind(cfg);
    let (input, out_w) = (data.train.input_width(), output_width(kind, &data.train));
    let specs = architecture(cfg, input, out_w)?;
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let (net, guide) = build_model(cfg, &specs, &mut rng)?;
    check_widths(&net, input, out_w)?;
    let lik = Likelihood::new(kind, data.train.len())?;
    Ok((specs, net, guide, lik))
}

fn run_svi(cfg: &RunConfig) -> Result<(Vec<LayerSpec>, Results)> {
    let data = load_data(cfg)?;
    let (specs, net, guide, lik) = prepare(cfg, &data)?;
    let mut bnn = VariationalBnn::new(net, guide, lik)?;
    let mut adam = Adam::new(cfg.lr);
    let first_epoch = match &cfg.resume {
        Some(path) => restore(path, &mut bnn, &mut adam)?,
        None => 0,
    };
    let batches = data.train.batches(cfg.batch_size.unwrap_or(data.train.len()))?;
    let opts = FitOptions {
        epochs: cfg.epochs,
        context: cfg.execution_context(),
        seed: cfg.seed,
        first_epoch,
        shuffle: true,
        ..FitOptions::default()
    };
    let history = bnn.fit(&batches, &mut adam, &opts, None)?;
    let epochs_done = first_epoch + history.elbo.len();

    let out = &cfg.output;
    output::write_text(&out.join("trace.csv"), &output::trace_csv(&history.step_losses, batches.len(), first_epoch))?;
    let mut records = param_records(&bnn);
    records.extend(adam_records(&adam));
    records.push(("meta.epochs_done".into(), Tensor::scalar(epochs_done as f64)));
    save_checkpoint(&out.join("checkpoint.bin"), &records)?;

    let samples = if bnn.guide.sites().is_empty() { 1 } else { cfg.num_samples };
    let pseed = predict_seed(cfg.seed);
    let eval = bnn.evaluate(&data.test.inputs, &data.test.targets, samples, pseed)?;
    let mut results = Results {
        nll: -eval.log_likelihood,
        error: eval.error,
        final_elbo: history.elbo.last().copied(),
        epochs_completed: Some(epochs_done),
        ..Results::default()
    };
    output::write_text(
        &out.join("predictions.csv"),
        &output::predictions_csv(&eval.aggregated, &data.test.targets, None),
    )?;
    let ood = data
        .ood
        .as_ref()
        .map(|d| bnn.predict_aggregated(&d.inputs, samples, pseed))
        .transpose()?;
    classification_extras(out, &mut results, &eval.aggregated, &data.test.targets, ood.as_ref())?;
    if data.toy {
        let (xs, grid) = grid_inputs();
        if let Aggregated::Gaussian { mean, sd } = bnn.predict_aggregated(&grid, samples, pseed)? {
            output::write_text(&out.join("grid.csv"), &output::grid_csv(&xs, &mean, &sd))?;
        }
    }
    Ok((specs, results))
}

fn run_hmc(cfg: &RunConfig) -> Result<(Vec<LayerSpec>, Results)> {
    let data = load_data(cfg)?;
    let (specs, net, _, lik) = prepare(cfg, &data)?;
    let hmc = cfg.hmc.as_ref().expect("hmc settings").to_config()?;
    let posterior = hmc_sample(&net, &lik, Some(&data.train), &hmc, cfg.seed)?;

    let out = &cfg.output;
    let mut records: Vec<(String, Tensor)> = net
        .deterministic_values()
        .into_iter()
        .map(|(k, v)| (format!("param.{k}"), v))
        .collect();
    for (i, s) in posterior.samples.iter().enumerate() {
        records.extend(s.iter().map(|(k, v)| (format!("sample.{i}.{k}"), v.clone())));
    }
    save_checkpoint(&out.join("checkpoint.bin"), &records)?;

    let aggregated = predict_aggregated(&net, &lik, &posterior, &data.test.inputs)?;
    let mut results = Results {
        nll: -lik.predictive_log_likelihood(&aggregated, &data.test.targets)?,
        error: lik.error(&aggregated, &data.test.targets)?,
        acceptance_rate: Some(posterior.acceptance_rate),
        divergences: Some(posterior.divergences),
        ..Results::default()
    };
    output::write_text(
        &out.join("predictions.csv"),
        &output::predictions_csv(&aggregated, &data.test.targets, None),
    )?;
    let ood = data
        .ood
        .as_ref()
        .map(|d| predict_aggregated(&net, &lik, &posterior, &d.inputs))
        .transpose()?;
    classification_extras(out, &mut results, &aggregated, &data.test.targets, ood.as_ref())?;
    if data.toy {
        let (xs, grid) = grid_inputs();
        if let Aggregated::Gaussian { mean, sd } = predict_aggregated(&net, &lik, &posterior, &grid)? {
            output::write_text(&out.join("grid.csv"), &output::grid_csv(&xs, &mean, &sd))?;
        }
    }
    Ok((specs, results))
}

fn run_vcl(cfg: &RunConfig) -> Result<(Vec<LayerSpec>, Results)> {
    if cfg.resume.is_some() {
        return Err(Error::Config("--resume is not supported for vcl".into()));
    }
    let v = cfg.vcl.as_ref().expect("vcl settings");
    let tasks = gen_split_tasks(v.split.parse()?, v.tasks, v.task_size, cfg.seed)?;
    let first = Data {
        train: tasks[0].train.clone(),
        test: tasks[0].test.clone(),
        ood: None,
        toy: false,
    };
    let (specs, net, guide, lik) = prepare(cfg, &first)?;
    let mut bnn = VariationalBnn::new(net, guide, lik)?;
    let samples = if bnn.guide.sites().is_empty() { 1 } else { cfg.num_samples };
    let vcfg = VclConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size.expect("vcl batch size"),
        num_samples: samples,
        seed: cfg.seed,
        context: cfg.execution_context(),
    };
    let matrix = run_task_sequence(&mut bnn, &tasks, &vcfg)?;

    let out = &cfg.output;
    output::write_json(&out.join("task_matrix.json"), &matrix)?;
    save_checkpoint(&out.join("checkpoint.bin"), &param_records(&bnn))?;

    let test_sets: Vec<&Dataset> = tasks.iter().map(|t| &t.test).collect();
    let all = Dataset::concat(&test_sets)?;
    let group: Vec<usize> = tasks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| std::iter::repeat_n(i, t.test.len()))
        .collect();
    let eval = bnn.evaluate(&all.inputs, &all.targets, samples, predict_seed(cfg.seed))?;
    output::write_text(
        &out.join("predictions.csv"),
        &output::predictions_csv(&eval.aggregated, &all.targets, Some(&group)),
    )?;
    let final_mean = matrix.final_mean();
    let mut results = Results {
        nll: -eval.log_likelihood,
        error: eval.error,
        epochs_completed: Some(cfg.epochs * tasks.len()),
        vcl_final_mean_accuracy: Some(final_mean),
        ..Results::default()
    };
    classification_extras(out, &mut results, &eval.aggregated, &all.targets, None)?;
    Ok((specs, results))
}
