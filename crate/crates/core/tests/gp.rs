mod common;

use common::{dense_log_pdf, dense_posterior, random_dataset, random_kernel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sprayopt::gp::{
    fit, log_marginal_likelihood, posterior, Dataset, FitConfig, GpModel, KernelParams,
    LinearMeanParams, MeanFunction, SignConstraint, Standardization,
};

#[test]
fn posterior_matches_dense_inverse_on_six_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = random_dataset(&mut rng, 6, 8);
    let k = random_kernel(&mut rng, 8);
    let model = GpModel::new(data.clone(), k.clone(), MeanFunction::Zero).unwrap();
    for _ in 0..20 {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = posterior(&model, &q).unwrap();
        let (m, v) = dense_posterior(data.inputs(), data.targets(), &k, &|_| 0.0, &q);
        assert!((got.mean - m).abs() < 1e-8);
        assert!((got.variance - v).abs() < 1e-8);
    }
}

#[test]
fn linear_mean_posterior_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = random_dataset(&mut rng, 8, 8);
    let k = random_kernel(&mut rng, 8);
    let mut mask = vec![SignConstraint::Fixed; 8];
    mask[1] = SignConstraint::Negative;
    mask[7] = SignConstraint::Positive;
    let mut coef = vec![0.0; 8];
    coef[1] = -0.7;
    coef[7] = 1.3;
    let mean = LinearMeanParams::new(coef.clone(), mask).unwrap();
    let model = GpModel::new(data.clone(), k.clone(), MeanFunction::Linear(mean)).unwrap();
    let mu = |x: &[f64]| x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
    let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = posterior(&model, &q).unwrap();
    let (m, v) = dense_posterior(data.inputs(), data.targets(), &k, &mu, &q);
    assert!((got.mean - m).abs() < 1e-8);
    assert!((got.variance - v).abs() < 1e-8);
}

#[test]
fn log_marginal_likelihood_matches_dense_log_pdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_dataset(&mut rng, 5, 8);
    let k = random_kernel(&mut rng, 8);
    let model = GpModel::new(data.clone(), k.clone(), MeanFunction::Zero).unwrap();
    let want = dense_log_pdf(data.inputs(), data.targets(), &k);
    assert!((log_marginal_likelihood(&model).unwrap() - want).abs() < 1e-8);
}

#[test]
fn fit_recovers_lengthscales_of_generating_gp() {
    // 200 draws from a unit-lengthscale GP on [-1, 1]^8. At this density neighbours are
    // strongly correlated, which makes the lengthscales identifiable.
    const R: f64 = 1.0;
    let mut good_runs = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let p = 200;
        let truth = KernelParams::isotropic(dim, 1.0, 1.0, 0.01).unwrap();
        let xs: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..dim).map(|_| rng.random_range(-R..R)).collect())
            .collect();
        let cov = nalgebra::DMatrix::from_fn(p, p, |i, j| {
            common::se_ard(&xs[i], &xs[j], &truth) + if i == j { truth.noise_variance } else { 0.0 }
        });
        let l = cov.cholesky().unwrap().unpack();
        let z = nalgebra::DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let y = l * z;
        let data = Dataset::new(xs, y.iter().copied().collect()).unwrap();
        let init = KernelParams::isotropic(dim, 0.5, 1.0, 0.1).unwrap();
        let cfg = FitConfig {
            restarts: 2,
            seed,
            ..FitConfig::default()
        };
        let model = fit(
            &data,
            &MeanFunction::Zero,
            &init,
            Standardization::identity(dim),
            &cfg,
        )
        .unwrap();
        let within = model
            .kernel()
            .lengthscales
            .iter()
            .filter(|l| **l > 0.5 && **l < 2.0)
            .count();
        if within >= 6 {
            good_runs += 1;
        }
    }
    assert!(
        good_runs >= 8,
        "only {good_runs} of 10 fits recovered ≥ 6 lengthscales"
    );
}

#[test]
fn microhardness_style_fit_keeps_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mask = vec![SignConstraint::Fixed; 8];
    mask[1] = SignConstraint::Negative;
    mask[7] = SignConstraint::Positive;
    // Targets push the coefficients toward the wrong signs.
    let xs: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..8).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let ys = xs
        .iter()
        .map(|x| 3.0 * x[1] - 2.0 * x[7] + 0.05 * rng.random_range(-1.0..1.0))
        .collect();
    let data = Dataset::new(xs, ys).unwrap();
    let init = KernelParams::isotropic(8, 0.5, 1.0, 0.1).unwrap();
    let model = fit(
        &data,
        &MeanFunction::Linear(LinearMeanParams::zeros(mask)),
        &init,
        Standardization::identity(8),
        &FitConfig::default(),
    )
    .unwrap();
    let c = &model.mean().linear().unwrap().coefficients;
    assert!(c[1] <= 0.0 && c[7] >= 0.0);
    assert!(c
        .iter()
        .enumerate()
        .all(|(i, v)| i == 1 || i == 7 || *v == 0.0));
}

#[test]
fn duplicated_dataset_fits_without_numerical_failure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = random_dataset(&mut rng, 10, 8);
    let mut data = base.clone();
    for (x, y) in base.inputs().iter().zip(base.targets()) {
        data.push(x.clone(), *y).unwrap();
    }
    let init = KernelParams::isotropic(8, 0.5, 1.0, 0.1).unwrap();
    fit(
        &data,
        &MeanFunction::Zero,
        &init,
        Standardization::identity(8),
        &FitConfig::default(),
    )
    .unwrap();
}

fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64, f64, Vec<f64>)>
{
    (1usize..8).prop_flat_map(|p| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), p),
            prop::collection::vec(-2.0f64..2.0, p),
            prop::collection::vec(0.2f64..2.0, 3),
            0.3f64..3.0,
            1e-4f64..0.5,
            prop::collection::vec(-1.5f64..1.5, 3),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_variance_is_non_negative((xs, ys, ls, sf, sn, q) in arb_instance()) {
        let k = KernelParams::new(ls, sf, sn).unwrap();
        let model = GpModel::new(Dataset::new(xs, ys).unwrap(), k, MeanFunction::Zero).unwrap();
        let v = model.posterior_unclamped(&q).unwrap().variance;
        prop_assert!(v >= -1e-10);
        prop_assert!(model.posterior(&q).unwrap().variance <= sf + model.jitter() + 1e-12);
    }

    #[test]
    fn noiseless_posterior_interpolates((xs, ys, ls, sf, _sn, _q) in arb_instance()) {
        // Well-separated inputs keep the noiseless system well conditioned.
        let xs: Vec<Vec<f64>> = xs.iter().enumerate().map(|(i, x)| {
            let mut x = x.clone();
            x[0] = 10.0 * i as f64;
            x
        }).collect();
        let k = KernelParams::new(ls, sf, 0.0).unwrap();
        let model = GpModel::new(Dataset::new(xs.clone(), ys.clone()).unwrap(), k, MeanFunction::Zero).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!((model.posterior(x).unwrap().mean - y).abs() < 1e-6);
        }
    }

    #[test]
    fn factorized_path_equals_dense_inverse((xs, ys, ls, sf, sn, q) in arb_instance()) {
        let k = KernelParams::new(ls, sf, sn).unwrap();
        let model = GpModel::new(Dataset::new(xs.clone(), ys.clone()).unwrap(), k.clone(), MeanFunction::Zero).unwrap();
        let got = model.posterior_unclamped(&q).unwrap();
        let (m, v) = dense_posterior(&xs, &ys, &k, &|_| 0.0, &q);
        prop_assert!((got.mean - m).abs() < 1e-8);
        prop_assert!((got.variance - v).abs() < 1e-8);
    }

    #[test]
    fn adding_a_point_never_increases_variance(
        (xs, ys, ls, sf, sn, q) in arb_instance(),
        extra in prop::collection::vec(-1.0f64..1.0, 3),
        y_extra in -2.0f64..2.0,
    ) {
        let k = KernelParams::new(ls, sf, sn).unwrap();
        let data = Dataset::new(xs, ys).unwrap();
        let before = GpModel::new(data.clone(), k.clone(), MeanFunction::Zero).unwrap();
        let mut more = data;
        more.push(extra, y_extra).unwrap();
        let after = before.with_data(more).unwrap();
        prop_assert!(after.posterior(&q).unwrap().variance <= before.posterior(&q).unwrap().variance + 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_never_returns_worse_than_start_and_keeps_masks(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_dataset(&mut rng, 12, 8);
        let init = KernelParams::isotropic(8, 0.5, 1.0, 0.1).unwrap();
        let mut mask = vec![SignConstraint::Fixed; 8];
        mask[1] = SignConstraint::Negative;
        mask[7] = SignConstraint::Positive;
        let mean = MeanFunction::Linear(LinearMeanParams::zeros(mask));
        let start = GpModel::new(data.clone(), init.clone(), mean.clone()).unwrap();
        let cfg = FitConfig { restarts: 2, seed, ..FitConfig::default() };
        let fitted = fit(&data, &mean, &init, Standardization::identity(8), &cfg).unwrap();
        prop_assert!(fitted.log_marginal_likelihood() >= start.log_marginal_likelihood() - 1e-9);
        let lin = fitted.mean().linear().unwrap();
        prop_assert!(lin.sign_mask.iter().zip(&lin.coefficients).all(|(m, c)| m.admits(*c)));
        let k = fitted.kernel();
        prop_assert!(k.lengthscales.iter().all(|l| (1e-3..=1e3).contains(l)));
        prop_assert!((1e-4..=1e4).contains(&k.signal_variance));
        prop_assert!(k.noise_variance >= 1e-8);
    }
}
