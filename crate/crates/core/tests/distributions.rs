use bnn_core::distributions::{
    kl_normal_normal, standard_normal, BernoulliDist, CategoricalDist, DiagonalNormal,
};
use bnn_core::tensor::{finite_difference_gradient, Graph};
use bnn_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normal(m: f64, s: f64) -> DiagonalNormal {
    DiagonalNormal::iid(m, s, &[1]).unwrap()
}

#[test]
fn log_density_examples() {
    let lp = normal(0.0, 1.0).log_prob(&Tensor::vector(vec![0.0])).unwrap();
    assert!((lp.item() + 0.918_938_533_204_672_7).abs() < 1e-12);

    let cat = CategoricalDist::new(Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert!((cat.log_prob(&Tensor::vector(vec![0.0])).unwrap().item() + 2f64.ln()).abs() < 1e-15);
    assert!(matches!(cat.log_prob(&Tensor::vector(vec![2.0])), Err(Error::Support(_))));

    let b = BernoulliDist::new(Tensor::vector(vec![0.0])).unwrap();
    assert!((b.log_prob(&Tensor::vector(vec![1.0])).unwrap().item() + 2f64.ln()).abs() < 1e-15);
    assert!(matches!(b.log_prob(&Tensor::vector(vec![0.5])), Err(Error::Support(_))));
}

#[test]
fn reparameterized_samples() {
    let d = normal(0.7, 2.0);
    assert_eq!(d.sample_reparameterized(&Tensor::vector(vec![0.0])).unwrap().item(), 0.7);
    let unit = normal(0.0, 1.0);
    assert_eq!(unit.sample_reparameterized(&Tensor::vector(vec![1.5])).unwrap().item(), 1.5);
    assert!(unit.sample_reparameterized(&Tensor::vector(vec![0.0, 1.0])).is_err());

    let d = DiagonalNormal::iid(2.0, 0.5, &[100_000]).unwrap();
    let s = d.sample(&mut ChaCha8Rng::seed_from_u64(1));
    let mean = s.mean();
    let sd = (s.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
    assert!((mean - 2.0).abs() < 0.01);
    assert!((sd - 0.5).abs() < 0.01);
}

#[test]
fn sd_floor() {
    let d = DiagonalNormal::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![1e-9])).unwrap();
    assert!(d.sd().item() >= 1e-6);
    assert!(d.log_prob(&Tensor::vector(vec![0.0])).unwrap().is_finite());
}

#[test]
fn kl_examples() {
    assert_eq!(kl_normal_normal(&normal(0.3, 0.8), &normal(0.3, 0.8)).unwrap(), 0.0);
    assert!((kl_normal_normal(&normal(1.0, 1.0), &normal(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
    let expected = 0.5f64.ln() + 2.0 - 0.5;
    let kl = kl_normal_normal(&normal(0.0, 2.0), &normal(0.0, 1.0)).unwrap();
    assert!((kl - expected).abs() < 1e-12);
    assert!((kl - 0.80685).abs() < 1e-5);

    // Monte Carlo check of E_q[ln q − ln p].
    let n = 1_000_000;
    let q = DiagonalNormal::iid(0.0, 2.0, &[n]).unwrap();
    let p = DiagonalNormal::iid(0.0, 1.0, &[n]).unwrap();
    let w = q.sample(&mut ChaCha8Rng::seed_from_u64(7));
    let diff = q.log_prob(&w).unwrap().zip_map(&p.log_prob(&w).unwrap(), |a, b| a - b).unwrap();
    assert!((diff.mean() - expected).abs() < 0.01 * expected);
}

#[test]
fn entropy_examples() {
    let one_hot = CategoricalDist::new(Tensor::vector(vec![30.0, -30.0])).unwrap();
    assert!(one_hot.entropy().item() < 1e-20);
    let uniform = CategoricalDist::new(Tensor::zeros(&[10])).unwrap();
    assert!((uniform.entropy().item() - 10f64.ln()).abs() < 1e-12);
    let skew = CategoricalDist::new(Tensor::vector(vec![0.7f64.ln(), 0.3f64.ln()])).unwrap();
    let direct = -(0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
    assert!((skew.entropy().item() - direct).abs() < 1e-12);
    assert!((skew.entropy().item() - 0.6109).abs() < 1e-4);
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.05f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.05f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality((qm, qs, pm, ps) in pair()) {
        let q = DiagonalNormal::new(Tensor::vector(qm.clone()), Tensor::vector(qs.clone()))?;
        let p = DiagonalNormal::new(Tensor::vector(pm), Tensor::vector(ps))?;
        let kl = kl_normal_normal(&q, &p)?;
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_normal_normal(&q, &q)?.abs() <= 1e-12);
        if q != p {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn categorical_mass_sums_to_one(logits in prop::collection::vec(-20.0f64..20.0, 2..=10)) {
        let k = logits.len();
        let cat = CategoricalDist::new(Tensor::vector(logits))?;
        let total: f64 = (0..k)
            .map(|c| cat.log_prob(&Tensor::vector(vec![c as f64])).unwrap().item().exp())
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let h = cat.entropy().item();
        prop_assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn reparameterized_gradients_pass_fd(m in -2.0f64..2.0, s in 0.1f64..2.0, eps in -2.0f64..2.0, x in -2.0f64..2.0) {
        // d/d(m, s) of log N(x | m + s·eps, 1) via the graph, against FD.
        let f = |t: &Tensor, grad: bool| -> bnn_core::Result<(f64, Option<Tensor>)> {
            let mut g = Graph::new();
            let ms = g.leaf("ms", t.clone(), true)?;
            let mu = g.slice_cols(ms, 0, 1)?;
            let sd = g.slice_cols(ms, 1, 2)?;
            let scaled = g.scale(sd, eps)?;
            let w = g.add(mu, scaled)?;
            let xv = g.constant(Tensor::matrix(1, 1, vec![x])?);
            let d = g.sub(xv, w)?;
            let sq = g.square(d)?;
            let out = g.sum(sq)?;
            let gr = if grad { Some(g.backward(out)?.get("ms").unwrap().clone()) } else { None };
            Ok((g.value(out).item(), gr))
        };
        let t = Tensor::matrix(1, 2, vec![m, s])?;
        let an = f(&t, true)?.1.unwrap();
        let fd = finite_difference_gradient(|p| Ok(f(p, false)?.0), &t, 1e-5)?;
        for (a, b) in an.data().iter().zip(fd.data()) {
            prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3));
        }
    }

    #[test]
    fn standard_normal_is_seeded(seed in any::<u64>()) {
        let a = standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[5]);
        let b = standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[5]);
        prop_assert_eq!(a, b);
    }
}
