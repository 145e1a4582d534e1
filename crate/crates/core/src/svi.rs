//! Stochastic variational inference: ELBO estimation, Adam, fit/predict and
//! the execution contexts that change how dense layers are sampled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{kl_normal_graph, normal_log_prob_graph, standard_normal};
use crate::error::{Error, Result};
use crate::guides::{loc_name, rho_name, MeanFieldGuide};
use crate::likelihoods::{Aggregated, Likelihood};
use crate::network::{dense_plain, DenseCall, Network, Treatment};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Environment variable selecting the number of prediction threads.
pub const THREADS_ENV: &str = "BNN_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionContext {
    #[default]
    Plain,
    LocalReparameterization,
    Flipout,
}

impl FromStr for ExecutionContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "local-reparam" | "local_reparameterization" => Ok(Self::LocalReparameterization),
            "flipout" => Ok(Self::Flipout),
            other => Err(Error::Config(format!("unknown execution context {other:?}"))),
        }
    }
}

impl fmt::Display for ExecutionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::LocalReparameterization => "local-reparam",
            Self::Flipout => "flipout",
        })
    }
}

/// A mini-batch. Rows of `inputs` and `targets` correspond.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Self {
        Self {
            inputs,
            targets,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Consecutive batches of at most `batch_size` rows.
pub fn make_batches(inputs: &Tensor, targets: &Tensor, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if inputs.rows() != targets.rows() {
        return Err(Error::Contract(format!(
            "{} input rows but {} target rows",
            inputs.rows(),
            targets.rows()
        )));
    }
    let n = inputs.rows();
    Ok((0..n)
        .step_by(batch_size)
        .map(|s| {
            let e = (s + batch_size).min(n);
            Batch::new(inputs.slice_rows(s, e), targets.slice_rows(s, e))
        })
        .collect())
}

/// Generator for one epoch or one posterior sample: a fixed seed with a
/// distinct stream per index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected update to every parameter with a gradient.
    pub fn apply(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for {name:?}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = m.data()[i] / c1;
                let vh = v.data()[i] / c2;
                p.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub context: ExecutionContext,
    pub seed: u64,
    /// Index of the first epoch; a resumed run continues the stream sequence.
    pub first_epoch: usize,
    /// Monte Carlo samples per ELBO estimate.
    pub particles: usize,
    pub shuffle: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            context: ExecutionContext::Plain,
            seed: 0,
            first_epoch: 0,
            particles: 1,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitHistory {
    /// Mean ELBO of each completed epoch.
    pub elbo: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub stop_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub loss: f64,
    pub kl: f64,
    pub log_likelihood: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub error: f64,
    pub aggregated: Aggregated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalBnn {
    pub net: Network,
    pub guide: MeanFieldGuide,
    pub likelihood: Likelihood,
}

type Leaves = BTreeMap<String, Var>;

fn signs<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter();
    match it.next() {
        None => Ok(g.scalar(0.0)),
        Some(&first) => it.try_fold(first, |acc, &v| g.add(acc, v)),
    }
}

impl VariationalBnn {
    pub fn new(net: Network, guide: MeanFieldGuide, likelihood: Likelihood) -> Result<Self> {
        let bayes: BTreeSet<&str> = net.bayesian_sites().map(|s| s.name.as_str()).collect();
        if bayes != guide.site_names() {
            return Err(Error::Contract(
                "guide sites must equal the bayesian sites of the network".into(),
            ));
        }
        for s in guide.sites() {
            let site = net.site(&s.name).expect("checked above");
            if site.shape.as_slice() != s.loc.shape() {
                return Err(Error::Contract(format!("guide site {:?} has the wrong shape", s.name)));
            }
        }
        Ok(Self {
            net,
            guide,
            likelihood,
        })
    }

    /// Every optimizable tensor with its trainability: guide `loc`/`rho`
    /// tensors and deterministic site values.
    pub fn parameters(&self) -> Vec<(String, Tensor, bool)> {
        let mut out = self.guide.parameters();
        out.extend(self.net.deterministic_values().into_iter().map(|(n, v)| (n, v, true)));
        out
    }

    pub fn trainable_parameters(&self) -> BTreeMap<String, Tensor> {
        self.parameters()
            .into_iter()
            .filter(|p| p.2)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.guide.set_parameter(name, value.clone())? {
            return Ok(());
        }
        self.net.set_deterministic(name, value)
    }

    /// One Adam update from `grads`, then the guide's sd projection.
    pub fn apply_gradients(&mut self, adam: &mut Adam, grads: &Gradients) -> Result<()> {
        let mut params = self.trainable_parameters();
        adam.apply(&mut params, grads)?;
        for (name, value) in params {
            self.set_parameter(&name, value)?;
        }
        self.guide.clamp();
        Ok(())
    }

    fn register_leaves(&self, g: &mut Graph) -> Result<Leaves> {
        let mut leaves = Leaves::new();
        for (name, value, trainable) in self.parameters() {
            let v = match g.leaf_var(&name) {
                Some(v) => v,
                None => g.leaf(&name, value, trainable)?,
            };
            leaves.insert(name, v);
        }
        Ok(leaves)
    }

    /// One posterior sample through the network. Returns the output and the
    /// KL term for this sample (closed form where available, otherwise
    /// `log q(w) - log p(w)` at the sampled weights), plus MAP penalties
    /// `-log p(θ)` of deterministic sites that keep their prior.
    fn sample_pass<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        input: Var,
        ctx: ExecutionContext,
        with_kl: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let mut values: BTreeMap<String, Var> = BTreeMap::new();
        let mut kl_terms = Vec::new();
        for s in self.guide.sites() {
            let loc = leaves[&loc_name(&s.name)];
            let rho = leaves[&rho_name(&s.name)];
            let eps = g.constant(standard_normal(rng, s.loc.shape()));
            let sd = g.exp(rho)?;
            let noise = g.mul(sd, eps)?;
            let w = g.add(loc, noise)?;
            values.insert(s.name.clone(), w);
            if !with_kl {
                continue;
            }
            let prior = self.net.site(&s.name).and_then(|p| p.prior()).expect("bayesian site");
            let kl = match prior.as_normal() {
                Some(p) => kl_normal_graph(g, loc, rho, p)?,
                None => {
                    let lq = normal_log_prob_graph(g, w, loc, sd)?;
                    let lq = g.sum(lq)?;
                    let lp = prior.log_prob_graph(g, w)?;
                    g.sub(lq, lp)?
                }
            };
            kl_terms.push(kl);
        }
        for s in self.net.deterministic_sites() {
            let v = leaves[&s.name];
            values.insert(s.name.clone(), v);
            if let Treatment::Deterministic {
                map_prior: Some(p), ..
            } = &s.treatment
            {
                if with_kl {
                    let lp = p.log_prob_graph(g, v)?;
                    kl_terms.push(g.neg(lp)?);
                }
            }
        }
        let kl = sum_vars(g, &kl_terms)?;
        let out = self
            .net
            .forward_graph(g, input, |g, call| self.dense_under(g, call, ctx, leaves, &values, rng))?;
        Ok((out, kl))
    }

    fn dense_under<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        call: DenseCall<'_>,
        ctx: ExecutionContext,
        leaves: &Leaves,
        values: &BTreeMap<String, Var>,
        rng: &mut R,
    ) -> Result<Var> {
        let wname = &call.weight.name;
        let bayes_w = self.guide.site(wname).is_some();
        if ctx == ExecutionContext::Plain || !bayes_w {
            let b = call.bias.map(|b| values[&b.name]);
            return dense_plain(g, call.input, values[wname], b);
        }
        let loc_w = leaves[&loc_name(wname)];
        let rho_w = leaves[&rho_name(wname)];
        let (bias_mean, bias_rho) = match call.bias {
            None => (None, None),
            Some(b) if self.guide.site(&b.name).is_some() => {
                (Some(leaves[&loc_name(&b.name)]), Some(leaves[&rho_name(&b.name)]))
            }
            Some(b) => (Some(values[&b.name]), None),
        };
        let x = call.input;
        let batch = g.shape(x)[0];
        let (out_f, in_f) = (call.weight.shape[0], call.weight.shape[1]);
        let mean = dense_plain(g, x, loc_w, bias_mean)?;
        match ctx {
            ExecutionContext::LocalReparameterization => {
                let x2 = g.square(x)?;
                let two_rho = g.scale(rho_w, 2.0)?;
                let var_w = g.exp(two_rho)?;
                let mut var = g.matmul_t(x2, var_w)?;
                if let Some(rb) = bias_rho {
                    let two = g.scale(rb, 2.0)?;
                    let vb = g.exp(two)?;
                    let vb = g.broadcast(vb, &[batch, out_f])?;
                    var = g.add(var, vb)?;
                }
                let sd = g.sqrt(var)?;
                let eps = g.constant(standard_normal(rng, &[batch, out_f]));
                let noise = g.mul(sd, eps)?;
                g.add(mean, noise)
            }
            ExecutionContext::Flipout => {
                let e = g.constant(standard_normal(rng, &[out_f, in_f]));
                let s_in = g.constant(signs(rng, &[batch, in_f]));
                let s_out = g.constant(signs(rng, &[batch, out_f]));
                let sd_w = g.exp(rho_w)?;
                let dw = g.mul(sd_w, e)?;
                let xs = g.mul(x, s_in)?;
                let p = g.matmul_t(xs, dw)?;
                let p = g.mul(p, s_out)?;
                let mut out = g.add(mean, p)?;
                if let Some(rb) = bias_rho {
                    let eb = g.constant(standard_normal(rng, &[batch, out_f]));
                    let sdb = g.exp(rb)?;
                    let sdb = g.broadcast(sdb, &[batch, out_f])?;
                    let nb = g.mul(sdb, eb)?;
                    out = g.add(out, nb)?;
                }
                Ok(out)
            }
            ExecutionContext::Plain => unreachable!("handled above"),
        }
    }

    /// Single-sample (or `particles`-sample) estimate of
    /// `KL - (N/B) · log p(targets | w)` with gradients for every trainable
    /// tensor.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        ctx: ExecutionContext,
        particles: usize,
        rng: &mut R,
    ) -> Result<ElboEstimate> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if particles == 0 {
            return Err(Error::Config("particles must be positive".into()));
        }
        let b = batch.len();
        let n = self.likelihood.dataset_size;
        if n < b {
            return Err(Error::Contract(format!("dataset size {n} is smaller than the batch {b}")));
        }
        let scale = n as f64 / b as f64;
        let mut g = Graph::new();
        let leaves = self.register_leaves(&mut g)?;
        let x = g.constant(batch.inputs.clone());
        let (mut terms, mut kls, mut lls) = (Vec::new(), 0.0, 0.0);
        for _ in 0..particles {
            let (out, kl) = self.sample_pass(&mut g, &leaves, x, ctx, true, rng)?;
            let ll = self
                .likelihood
                .log_likelihood_graph(&mut g, out, &batch.targets, batch.mask.as_deref())?;
            kls += g.value(kl).item();
            lls += g.value(ll).item();
            let scaled = g.scale(ll, -scale)?;
            terms.push(g.add(kl, scaled)?);
        }
        let total = sum_vars(&mut g, &terms)?;
        let loss = g.scale(total, 1.0 / particles as f64)?;
        let grads = g.backward(loss)?;
        let p = particles as f64;
        Ok(ElboEstimate {
            loss: g.value(loss).item(),
            kl: kls / p,
            log_likelihood: lls / p,
            grads,
        })
    }

    /// One posterior-sample forward pass under `ctx`.
    pub fn forward_under<R: Rng + ?Sized>(&self, ctx: ExecutionContext, input: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let leaves = self.register_leaves(&mut g)?;
        let x = g.constant(input.clone());
        let (out, _) = self.sample_pass(&mut g, &leaves, x, ctx, false, rng)?;
        Ok(g.value(out).clone())
    }

    /// Forward pass with the guide means in place of samples.
    pub fn mean_forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut params = self.net.deterministic_values();
        for s in self.guide.sites() {
            params.insert(s.name.clone(), s.loc.clone());
        }
        self.net.forward(&params, input)
    }

    pub fn fit(
        &mut self,
        batches: &[Batch],
        adam: &mut Adam,
        opts: &FitOptions,
        mut callback: Option<&mut dyn FnMut(usize, f64) -> bool>,
    ) -> Result<FitHistory> {
        if opts.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if batches.is_empty() {
            return Err(Error::Config("no training batches".into()));
        }
        let mut history = FitHistory::default();
        for epoch in opts.first_epoch..opts.first_epoch + opts.epochs {
            let mut rng = stream_rng(opts.seed, epoch as u64);
            let mut order: Vec<usize> = (0..batches.len()).collect();
            if opts.shuffle {
                order.shuffle(&mut rng);
            }
            let mut total = 0.0;
            for &i in &order {
                let est = self
                    .elbo_loss(&batches[i], opts.context, opts.particles, &mut rng)
                    .map_err(|e| match e {
                        Error::Numeric { context, detail } => Error::Numeric {
                            context: format!("epoch {epoch}: {context}"),
                            detail,
                        },
                        other => other,
                    })?;
                if !est.loss.is_finite() {
                    return Err(Error::Numeric {
                        context: format!("epoch {epoch}"),
                        detail: "non-finite loss".into(),
                    });
                }
                history.step_losses.push(est.loss);
                total += est.loss;
                self.apply_gradients(adam, &est.grads)?;
            }
            let elbo = -total / batches.len() as f64;
            history.elbo.push(elbo);
            if let Some(cb) = callback.as_mut() {
                if cb(epoch, elbo) {
                    history.stop_epoch = Some(epoch);
                    break;
                }
            }
        }
        Ok(history)
    }

    /// Stacked `S×B×W` outputs of `num_samples` posterior samples. Sample `s`
    /// uses stream `s` of `seed`, so the result is the same for any thread
    /// count.
    pub fn predict(&self, inputs: &Tensor, num_samples: usize, seed: u64, ctx: ExecutionContext) -> Result<Tensor> {
        if num_samples == 0 {
            return Err(Error::Config("num_samples must be at least 1".into()));
        }
        let one = |s: usize| self.forward_under(ctx, inputs, &mut stream_rng(seed, s as u64));
        let outs = parallel_map(num_samples, one)?;
        Tensor::stack(&outs)
    }

    pub fn predict_aggregated(&self, inputs: &Tensor, num_samples: usize, seed: u64) -> Result<Aggregated> {
        let stacked = self.predict(inputs, num_samples, seed, ExecutionContext::Plain)?;
        self.likelihood.aggregate_predictions(&stacked)
    }

    pub fn evaluate(&self, inputs: &Tensor, targets: &Tensor, num_samples: usize, seed: u64) -> Result<Evaluation> {
        let aggregated = self.predict_aggregated(inputs, num_samples, seed)?;
        Ok(Evaluation {
            log_likelihood: self.likelihood.predictive_log_likelihood(&aggregated, targets)?,
            error: self.likelihood.error(&aggregated, targets)?,
            aggregated,
        })
    }
}

/// Number of worker threads requested through [`THREADS_ENV`].
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Evaluates `f(0..n)` on up to [`thread_count`] threads, results in index
/// order.
pub fn parallel_map<T: Send, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut results: Vec<(usize, Result<T>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                scope.spawn(move || (t..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    results.sort_by_key(|r| r.0);
    results.into_iter().map(|r| r.1).collect()
}

/// A network with a guide whose forward pass also records the KL term of the
/// sample it used, for composing custom objectives.
#[derive(Debug, Clone)]
pub struct KlCachedBnn {
    pub bnn: VariationalBnn,
    cached_kl: Option<f64>,
}

impl KlCachedBnn {
    pub fn new(bnn: VariationalBnn) -> Result<Self> {
        if bnn.guide.sites().is_empty() {
            return Err(Error::Contract("a variational guide is required".into()));
        }
        Ok(Self { bnn, cached_kl: None })
    }

    /// KL of the most recent forward pass.
    pub fn cached_kl(&self) -> Option<f64> {
        self.cached_kl
    }

    /// Records one posterior-sample forward pass in `g`. Returns the output
    /// and the KL node; gradients of any loss built from them reach the
    /// guide leaves.
    pub fn forward_graph<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        input: Var,
        ctx: ExecutionContext,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let leaves = self.bnn.register_leaves(g)?;
        let (out, kl) = self.bnn.sample_pass(g, &leaves, input, ctx, true, rng)?;
        self.cached_kl = Some(g.value(kl).item());
        Ok((out, kl))
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (out, _) = self.forward_graph(&mut g, x, ExecutionContext::Plain, rng)?;
        Ok(g.value(out).clone())
    }
}
