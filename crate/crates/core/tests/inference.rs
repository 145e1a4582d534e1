use std::collections::BTreeMap;

use bnn_core::data::{gen_split_tasks, Dataset, SplitKind};
use bnn_core::guides::{init_guide, rho_name, InitScheme, MeanFieldGuide};
use bnn_core::likelihoods::{Aggregated, Likelihood, LikelihoodKind};
use bnn_core::mcmc::{hmc_sample, leapfrog, potential_energy, HmcConfig, Kernel};
use bnn_core::network::{Activation, LayerSpec, Network};
use bnn_core::priors::{assign_priors, to_point_estimates, update_priors, PriorSpec, SiteFilter};
use bnn_core::svi::{stream_rng, Adam, Batch, ExecutionContext, FitOptions, KlCachedBnn, VariationalBnn};
use bnn_core::tensor::finite_difference_gradient;
use bnn_core::vcl::{posterior_to_prior, run_task_sequence, VclConfig};
use bnn_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CONTEXTS: [ExecutionContext; 3] = [
    ExecutionContext::Plain,
    ExecutionContext::LocalReparameterization,
    ExecutionContext::Flipout,
];

fn small_net() -> Network {
    let net = Network::build(&[
        LayerSpec::dense(2, 5, true),
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::dense(5, 2, true),
    ])
    .unwrap();
    assign_priors(&net, &PriorSpec::standard_normal(), &SiteFilter::all(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn vbnn(kind: LikelihoodKind, n: usize, sd_init: f64, seed: u64) -> VariationalBnn {
    let net = small_net();
    let scheme = InitScheme {
        sd_init,
        ..InitScheme::default()
    };
    let guide = init_guide(&net, &scheme, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    VariationalBnn::new(net, guide, Likelihood::new(kind, n).unwrap()).unwrap()
}

fn data(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = stream_rng(seed, 99);
    let x = bnn_core::distributions::standard_normal(&mut r, &[n, 2]);
    let y = Tensor::matrix(n, 1, (0..n).map(|i| ((x.at(i, 0) + x.at(i, 1)) > 0.0) as u8 as f64).collect()).unwrap();
    (x, y)
}

#[test]
fn zero_variance_contexts_agree_with_mean_network() {
    let b = vbnn(LikelihoodKind::Categorical, 6, 1e-6, 1);
    let (x, _) = data(6, 0);
    let mean = b.mean_forward(&x).unwrap();
    for ctx in CONTEXTS {
        let out = b.forward_under(ctx, &x, &mut stream_rng(4, 0)).unwrap();
        for (a, m) in out.data().iter().zip(mean.data()) {
            assert!((a - m).abs() < 1e-4, "{ctx}: {a} vs {m}");
        }
    }
}

#[test]
fn batch_scaling_matches_full_batch_for_point_estimates() {
    for keep_prior in [false, true] {
        let mut b = vbnn(LikelihoodKind::Categorical, 12, 1e-4, 0);
        b.net = to_point_estimates(&b.net, keep_prior, &mut ChaCha8Rng::seed_from_u64(1));
        b.guide = MeanFieldGuide::from_sites(Vec::new(), None).unwrap();
        let (x, y) = data(12, 3);
        let full = b.elbo_loss(&Batch::new(x.clone(), y.clone()), ExecutionContext::Plain, 1, &mut stream_rng(0, 0)).unwrap();
        let batches = bnn_core::svi::make_batches(&x, &y, 4).unwrap();
        let mean = batches
            .iter()
            .map(|bt| b.elbo_loss(bt, ExecutionContext::Plain, 1, &mut stream_rng(0, 0)).unwrap().loss)
            .sum::<f64>()
            / batches.len() as f64;
        assert!((mean - full.loss).abs() <= 1e-12 * full.loss.abs().max(1.0), "{mean} vs {}", full.loss);
    }
}

#[test]
fn predict_contracts() {
    let b = vbnn(LikelihoodKind::Categorical, 6, 0.3, 2);
    let (x, y) = data(6, 1);
    let one = b.predict(&x, 1, 0, ExecutionContext::Plain).unwrap();
    assert_eq!(one.shape(), &[1, 6, 2]);
    let Aggregated::Probabilities(p) = b.predict_aggregated(&x, 32, 5).unwrap() else { panic!() };
    for r in 0..6 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let eval = b.evaluate(&x, &y, 8, 1).unwrap();
    let acc = (0..6).filter(|&r| {
        let row = eval.aggregated.values().row(r);
        (row[1] > row[0]) as u8 as f64 == y.data()[r]
    }).count() as f64 / 6.0;
    assert!((eval.error - (1.0 - acc)).abs() < 1e-12);

    let tight = vbnn(LikelihoodKind::Categorical, 6, 1e-6, 2);
    let s = tight.predict(&x, 4, 0, ExecutionContext::Plain).unwrap();
    let per = s.len() / 4;
    for k in 1..4 {
        for i in 0..per {
            assert!((s.data()[k * per + i] - s.data()[i]).abs() < 1e-4);
        }
    }
}

#[test]
fn homoskedastic_mean_converges_to_guide_mean() {
    let mut b = vbnn(LikelihoodKind::HomoskedasticGaussian { sd: 0.1 }, 6, 1e-6, 3);
    let net = Network::build(&[LayerSpec::dense(2, 3, true), LayerSpec::Activation(Activation::Tanh), LayerSpec::dense(3, 1, true)]).unwrap();
    b.net = assign_priors(&net, &PriorSpec::standard_normal(), &SiteFilter::all(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    b.guide = init_guide(&b.net, &InitScheme { sd_init: 1e-6, ..InitScheme::default() }, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let (x, _) = data(6, 2);
    let Aggregated::Gaussian { mean, .. } = b.predict_aggregated(&x, 64, 0).unwrap() else { panic!() };
    let direct = b.mean_forward(&x).unwrap();
    for (a, m) in mean.data().iter().zip(direct.data()) {
        assert!((a - m).abs() < 1e-3);
    }
}

#[test]
fn aggregation_ignores_sample_order() {
    let b = vbnn(LikelihoodKind::Categorical, 6, 0.5, 4);
    let (x, _) = data(6, 4);
    let s = b.predict(&x, 9, 3, ExecutionContext::Plain).unwrap();
    let per = s.len() / 9;
    let mut shuffled = Vec::with_capacity(s.len());
    for k in (0..9).rev() {
        shuffled.extend_from_slice(&s.data()[k * per..(k + 1) * per]);
    }
    let rev = Tensor::new(s.shape().to_vec(), shuffled).unwrap();
    assert_eq!(b.likelihood.aggregate_predictions(&s).unwrap(), b.likelihood.aggregate_predictions(&rev).unwrap());
}

#[test]
fn kl_cached_forward() {
    let b = vbnn(LikelihoodKind::Categorical, 6, 0.2, 5);
    let closed = b.guide.guide_kl(&b.net).unwrap();
    let mut cached = KlCachedBnn::new(b.clone()).unwrap();
    let (x, _) = data(3, 0);
    cached.forward(&x, &mut stream_rng(1, 0)).unwrap();
    let first = cached.cached_kl().unwrap();
    cached.forward(&x, &mut stream_rng(2, 0)).unwrap();
    assert!((first - closed).abs() < 1e-9);
    assert_eq!(first, cached.cached_kl().unwrap());

    let mut promoted = b.clone();
    posterior_to_prior(&mut promoted).unwrap();
    let mut zero = KlCachedBnn::new(promoted).unwrap();
    zero.forward(&x, &mut stream_rng(1, 0)).unwrap();
    assert_eq!(zero.cached_kl().unwrap(), 0.0);

    let mut empty = b;
    empty.net = to_point_estimates(&empty.net, false, &mut ChaCha8Rng::seed_from_u64(0));
    empty.guide = MeanFieldGuide::from_sites(Vec::new(), None).unwrap();
    assert!(KlCachedBnn::new(empty).is_err());
}

#[test]
fn laplace_prior_uses_monte_carlo_kl() {
    let mut b = vbnn(LikelihoodKind::Categorical, 6, 0.2, 6);
    let net = Network::build(&[LayerSpec::dense(2, 5, true), LayerSpec::Activation(Activation::Tanh), LayerSpec::dense(5, 2, true)]).unwrap();
    let lap = PriorSpec::Iid(bnn_core::priors::ScalarPrior::Laplace { loc: 0.0, scale: 1.0 });
    b.net = assign_priors(&net, &lap, &SiteFilter::all(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut cached = KlCachedBnn::new(b).unwrap();
    let (x, _) = data(3, 0);
    cached.forward(&x, &mut stream_rng(1, 0)).unwrap();
    let a = cached.cached_kl().unwrap();
    cached.forward(&x, &mut stream_rng(2, 0)).unwrap();
    assert_ne!(a, cached.cached_kl().unwrap());
}

#[test]
fn variance_cap_holds_along_the_trajectory() {
    let net = small_net();
    let scheme = InitScheme {
        sd_init: 0.05,
        ..InitScheme::default()
    };
    let guide = init_guide(&net, &scheme, Some(0.1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut b = VariationalBnn::new(net, guide, Likelihood::new(LikelihoodKind::Categorical, 8).unwrap()).unwrap();
    // A wide prior pulls every sd upward.
    let wide = b.guide.export_distributions().into_iter().map(|(k, d)| {
        let sd = d.sd().map(|_| 10.0);
        (k, bnn_core::distributions::DiagonalNormal::new(d.mean().clone(), sd).unwrap())
    }).collect::<BTreeMap<_, _>>();
    b.net = update_priors(&b.net, &wide).unwrap();
    let (x, y) = data(8, 5);
    let batch = Batch::new(x, y);
    let mut adam = Adam::new(0.05);
    for step in 0..200 {
        let est = b.elbo_loss(&batch, ExecutionContext::Plain, 1, &mut stream_rng(1, step)).unwrap();
        b.apply_gradients(&mut adam, &est.grads).unwrap();
        for s in b.guide.sites() {
            assert!(s.rho.data().iter().all(|r| (1e-6..=0.1 + 1e-15).contains(&r.exp())));
        }
    }
    assert!(b.guide.sites().iter().any(|s| s.rho.data().iter().any(|r| (r.exp() - 0.1).abs() < 1e-12)));
}

#[test]
fn fixed_means_are_bit_identical_after_fit() {
    let net = small_net();
    let scheme = InitScheme {
        train_mean: false,
        ..InitScheme::default()
    };
    let guide = init_guide(&net, &scheme, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut b = VariationalBnn::new(net, guide, Likelihood::new(LikelihoodKind::Categorical, 8).unwrap()).unwrap();
    let before: Vec<Tensor> = b.guide.sites().iter().map(|s| s.loc.clone()).collect();
    let rho_before = b.guide.sites()[0].rho.clone();
    let (x, y) = data(8, 6);
    let opts = FitOptions {
        epochs: 20,
        ..FitOptions::default()
    };
    b.fit(&[Batch::new(x, y)], &mut Adam::new(0.01), &opts, None).unwrap();
    let after: Vec<Tensor> = b.guide.sites().iter().map(|s| s.loc.clone()).collect();
    assert_eq!(before, after);
    assert_ne!(rho_before, b.guide.sites()[0].rho);
}

#[test]
fn fit_rejects_degenerate_inputs() {
    let mut b = vbnn(LikelihoodKind::Categorical, 8, 1e-4, 0);
    assert!(matches!(b.fit(&[], &mut Adam::new(0.01), &FitOptions::default(), None), Err(Error::Config(_))));
    let (x, y) = data(8, 0);
    let small = vbnn(LikelihoodKind::Categorical, 4, 1e-4, 0);
    assert!(small.elbo_loss(&Batch::new(x, y), ExecutionContext::Plain, 1, &mut stream_rng(0, 0)).is_err());
}

#[test]
fn fit_is_seed_deterministic() {
    let run = || {
        let mut b = vbnn(LikelihoodKind::Categorical, 8, 1e-2, 0);
        let (x, y) = data(8, 0);
        let batches = bnn_core::svi::make_batches(&x, &y, 3).unwrap();
        let opts = FitOptions {
            epochs: 10,
            context: ExecutionContext::Flipout,
            seed: 7,
            shuffle: true,
            ..FitOptions::default()
        };
        let h = b.fit(&batches, &mut Adam::new(0.01), &opts, None).unwrap();
        (h, b.guide)
    };
    assert_eq!(run(), run());
}

fn scalar_model(prior_sd: f64) -> (Network, Likelihood) {
    let net = Network::build(&[LayerSpec::dense(1, 1, false)]).unwrap();
    let spec = PriorSpec::Iid(bnn_core::priors::ScalarPrior::Normal { mean: 0.0, sd: prior_sd });
    let net = assign_priors(&net, &spec, &SiteFilter::all(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (net, Likelihood::new(LikelihoodKind::HomoskedasticGaussian { sd: 1.0 }, 1).unwrap())
}

#[test]
fn potential_energy_examples() {
    let (net, lik) = scalar_model(1.0);
    let at = |w: f64| BTreeMap::from([("layer0.weight".to_string(), Tensor::matrix(1, 1, vec![w]).unwrap())]);
    let (u, g) = potential_energy(&net, &lik, &at(2.0), None).unwrap();
    assert!((u - (2.0 + 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((g["layer0.weight"].item() - 2.0).abs() < 1e-12);

    let d = Dataset::new(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap(), Tensor::matrix(2, 1, vec![0.3, 0.4]).unwrap()).unwrap();
    let w0 = Tensor::matrix(1, 1, vec![0.7]).unwrap();
    let (_, g) = potential_energy(&net, &lik, &at(0.7), Some(&d)).unwrap();
    let fd = finite_difference_gradient(
        |t| Ok(potential_energy(&net, &lik, &at(t.item()), Some(&d))?.0),
        &w0,
        1e-5,
    )
    .unwrap();
    assert!((g["layer0.weight"].item() - fd.item()).abs() < 1e-4 * fd.item().abs().max(1e-3));
}

fn quadratic(q: &[f64]) -> bnn_core::Result<(f64, Vec<f64>)> {
    Ok((0.5 * q.iter().map(|v| v * v).sum::<f64>(), q.to_vec()))
}

#[test]
fn leapfrog_properties() {
    let zero = leapfrog(&[0.4], &[-1.2], &[0.4], 0.0, 5, &[1.0], quadratic);
    assert_eq!((zero.q, zero.p), (vec![0.4], vec![-1.2]));

    let (q0, p0) = (vec![0.8, -0.3], vec![0.1, 1.1]);
    let fwd = leapfrog(&q0, &p0, &q0, 0.1, 10, &[1.0, 1.0], quadratic);
    let back_p: Vec<f64> = fwd.p.iter().map(|v| -v).collect();
    let back = leapfrog(&fwd.q, &back_p, &fwd.grad, 0.1, 10, &[1.0, 1.0], quadratic);
    for (a, b) in back.q.iter().zip(&q0) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in back.p.iter().zip(&p0) {
        assert!((a + b).abs() < 1e-10);
    }

    let h = |q: &[f64], p: &[f64]| 0.5 * (q[0] * q[0] + p[0] * p[0]);
    let e = leapfrog(&[1.0], &[0.5], &[1.0], 0.1, 10, &[1.0], quadratic);
    assert!((h(&e.q, &e.p) - h(&[1.0], &[0.5])).abs() < 1e-3);

    // The one-step map is linear for a quadratic potential; its matrix has
    // determinant 1.
    let col = |q: f64, p: f64| {
        let s = leapfrog(&[q], &[p], &[q], 0.3, 1, &[1.0], quadratic);
        (s.q[0], s.p[0])
    };
    let (a, c) = col(1.0, 0.0);
    let (b, d) = col(0.0, 1.0);
    assert!((a * d - b * c - 1.0).abs() < 1e-12);

    let bad = leapfrog(&[1.0], &[0.0], &[1.0], 0.1, 3, &[1.0], |_| Err(Error::Numeric { context: "t".into(), detail: "x".into() }));
    assert!(bad.divergent);
}

#[test]
fn hmc_recovers_prior_and_is_deterministic() {
    let (net, lik) = scalar_model(1.0);
    let cfg = HmcConfig {
        step_size: 0.2,
        leapfrog_steps: 10,
        warmup: 200,
        num_samples: 10_000,
        ..HmcConfig::default()
    };
    let s = hmc_sample(&net, &lik, None, &cfg, 1).unwrap();
    let w = s.site_values("layer0.weight");
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 0.03, "{mean}");
    assert!((var - 1.0).abs() < 0.05, "{var}");
    assert!((0.0..=1.0).contains(&s.acceptance_rate));

    let short = HmcConfig { num_samples: 20, warmup: 5, ..cfg.clone() };
    assert_eq!(hmc_sample(&net, &lik, None, &short, 3).unwrap(), hmc_sample(&net, &lik, None, &short, 3).unwrap());
    let nuts = HmcConfig { kernel: Kernel::Nuts, ..cfg.clone() };
    assert!(matches!(hmc_sample(&net, &lik, None, &nuts, 0), Err(Error::Unsupported(_))));
    let huge = HmcConfig { step_size: 1e4, warmup: 20, num_samples: 5, ..cfg };
    let d = Dataset::new(Tensor::matrix(50, 1, vec![3.0; 50]).unwrap(), Tensor::matrix(50, 1, vec![1.0; 50]).unwrap()).unwrap();
    assert!(matches!(hmc_sample(&net, &lik, Some(&d), &huge, 0), Err(Error::Numeric { .. })));
}

#[test]
fn posterior_to_prior_invariants() {
    let mut b = vbnn(LikelihoodKind::Categorical, 6, 0.3, 9);
    b.net = assign_priors(&b.net, &PriorSpec::standard_normal(), &SiteFilter::all().hide_role(bnn_core::network::Role::Bias), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    b.guide = init_guide(&b.net, &InitScheme::default(), None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let guide = b.guide.clone();
    let fixed = b.net.deterministic_values();
    let sites: Vec<String> = b.net.sites().iter().map(|s| s.name.clone()).collect();
    posterior_to_prior(&mut b).unwrap();
    assert_eq!(b.guide, guide);
    assert_eq!(b.net.deterministic_values(), fixed);
    assert_eq!(b.net.sites().iter().map(|s| s.name.clone()).collect::<Vec<_>>(), sites);
    assert_eq!(b.guide.guide_kl(&b.net).unwrap(), 0.0);
    let once = b.net.clone();
    posterior_to_prior(&mut b).unwrap();
    assert_eq!(b.net, once);
}

#[test]
fn task_sequence_shapes_and_learning() {
    let tasks = gen_split_tasks(SplitKind::GaussianBlobs, 3, 100, 2).unwrap();
    let net = Network::build(&[LayerSpec::dense(2, 32, true), LayerSpec::Activation(Activation::Relu), LayerSpec::dense(32, 2, true)]).unwrap();
    let net = assign_priors(&net, &PriorSpec::standard_normal(), &SiteFilter::all(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let scheme = InitScheme {
        sd_init: 1e-4,
        ..InitScheme::default()
    };
    let guide = init_guide(&net, &scheme, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut b = VariationalBnn::new(net, guide, Likelihood::new(LikelihoodKind::Categorical, 100).unwrap()).unwrap();
    let cfg = VclConfig {
        epochs: 300,
        lr: 1e-2,
        batch_size: 50,
        num_samples: 8,
        seed: 0,
        context: ExecutionContext::LocalReparameterization,
    };
    let single = run_task_sequence(&mut b.clone(), &tasks[..1], &cfg).unwrap();
    assert_eq!(single.accuracy.len(), 1);
    assert_eq!(single.accuracy[0].len(), 1);

    let m = run_task_sequence(&mut b, &tasks, &cfg).unwrap();
    for (i, row) in m.accuracy.iter().enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    assert!(m.diagonal()[0] > 0.6, "{:?}", m.diagonal());
    assert!(single.accuracy[0][0] > 0.6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elbo_gradients_match_finite_differences(seed in any::<u64>(), ctx_i in 0usize..3, sd in 0.05f64..0.5) {
        let ctx = CONTEXTS[ctx_i];
        let mut b = vbnn(LikelihoodKind::Categorical, 10, sd, seed);
        let (x, y) = data(4, seed);
        let batch = Batch::new(x, y);
        let est = b.elbo_loss(&batch, ctx, 1, &mut stream_rng(seed, 0))?;
        for (name, value, trainable) in b.parameters() {
            if !trainable {
                continue;
            }
            let fd = finite_difference_gradient(|t| {
                let mut probe = b.clone();
                probe.set_parameter(&name, t.clone())?;
                Ok(probe.elbo_loss(&batch, ctx, 1, &mut stream_rng(seed, 0))?.loss)
            }, &value, 1e-5)?;
            let an = est.grads.get(&name).unwrap();
            for (a, f) in an.data().iter().zip(fd.data()) {
                prop_assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()).max(1e-3), "{ctx} {name}: {a} vs {f}");
            }
        }
        b.set_parameter(&rho_name("layer0.weight"), Tensor::full(&[5, 2], -3.0))?;
    }
}
