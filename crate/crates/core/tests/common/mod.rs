//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sprayopt::gp::{Dataset, KernelParams};

pub fn se_ard(a: &[f64], b: &[f64], k: &KernelParams) -> f64 {
    let mut s = 0.0;
    for d in 0..a.len() {
        let r = (a[d] - b[d]) / k.lengthscales[d];
        s += r * r;
    }
    k.signal_variance * (-0.5 * s).exp()
}

/// Posterior by explicit inversion of `K + σ²I`; `prior_mean` gives μ(x).
pub fn dense_posterior(
    xs: &[Vec<f64>],
    ys: &[f64],
    k: &KernelParams,
    prior_mean: &dyn Fn(&[f64]) -> f64,
    q: &[f64],
) -> (f64, f64) {
    let p = xs.len();
    if p == 0 {
        return (prior_mean(q), k.signal_variance);
    }
    let cov = DMatrix::from_fn(p, p, |i, j| {
        se_ard(&xs[i], &xs[j], k) + if i == j { k.noise_variance } else { 0.0 }
    });
    let inv = cov.try_inverse().expect("test covariance is invertible");
    let kq = DVector::from_fn(p, |i, _| se_ard(&xs[i], q, k));
    let r = DVector::from_fn(p, |i, _| ys[i] - prior_mean(&xs[i]));
    let mean = prior_mean(q) + (kq.transpose() * &inv * r)[0];
    let var = se_ard(q, q, k) - (kq.transpose() * &inv * &kq)[0];
    (mean, var)
}

/// Multivariate-normal log density of `ys` under the GP prior.
pub fn dense_log_pdf(xs: &[Vec<f64>], ys: &[f64], k: &KernelParams) -> f64 {
    let p = xs.len();
    let cov = DMatrix::from_fn(p, p, |i, j| {
        se_ard(&xs[i], &xs[j], k) + if i == j { k.noise_variance } else { 0.0 }
    });
    let det = cov.clone().determinant();
    let inv = cov.try_inverse().unwrap();
    let y = DVector::from_column_slice(ys);
    -0.5 * (y.transpose() * inv * &y)[0]
        - 0.5 * det.ln()
        - 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, dim: usize) -> KernelParams {
    KernelParams::new(
        (0..dim).map(|_| rng.random_range(0.3..2.0)).collect(),
        rng.random_range(0.5..3.0),
        rng.random_range(1e-3..0.5),
    )
    .unwrap()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, p: usize, dim: usize) -> Dataset {
    let xs: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    Dataset::new(xs, ys).unwrap()
}

pub mod campaign {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use sprayopt::acquisition::{feasibility_probability, ConstraintSpec, Measurements};
    use sprayopt::gp::PosteriorPrediction;
    use sprayopt::optimizer::{
        best_feasible, fit_constraint_models, CandidatePool, EvaluatedExperiment, FantasyMode,
        ProposalContext,
    };
    use sprayopt::process::{ControllableInputs, CostConfig, DomainBounds, InputVector, Powder};

    use super::dense_posterior;

    pub fn random_controllable(rng: &mut ChaCha8Rng, bounds: &DomainBounds) -> ControllableInputs {
        ControllableInputs::from_array(
            bounds
                .controllable()
                .map(|r| rng.random_range(r.min..=r.max)),
        )
    }

    pub fn random_input(rng: &mut ChaCha8Rng, bounds: &DomainBounds) -> InputVector {
        InputVector {
            controllable: random_controllable(rng, bounds),
            powder: if rng.random_bool(0.5) {
                Powder::A
            } else {
                Powder::B
            },
            voltage: rng.random_range(bounds.voltage.min..bounds.voltage.max),
        }
    }

    /// Smooth made-up response; `hv_shift` moves microhardness relative to its band.
    pub fn synthetic_outputs(x: &InputVector, bounds: &DomainBounds, hv_shift: f64) -> (f64, f64) {
        let (lo, hi) = bounds.feature_bounds();
        let f = x.features();
        let u: Vec<f64> = (0..8).map(|d| (f[d] - lo[d]) / (hi[d] - lo[d])).collect();
        let hv =
            600.0 + hv_shift + 90.0 * u[2] - 40.0 * u[1] + 25.0 * u[7] + 15.0 * (3.0 * u[0]).sin();
        let por = 9.5 - 4.0 * u[2] + 1.5 * u[0] - 0.8 * u[5];
        (hv, por)
    }

    pub fn synthetic_history(
        rng: &mut ChaCha8Rng,
        n: usize,
        hv_shift: f64,
    ) -> Vec<EvaluatedExperiment> {
        let bounds = DomainBounds::default();
        (0..n)
            .map(|_| {
                let x = random_input(rng, &bounds);
                let (hv, por) = synthetic_outputs(&x, &bounds, hv_shift);
                let m = Measurements {
                    microhardness: hv + rng.random_range(-8.0..8.0),
                    porosity: por + rng.random_range(-0.5..0.5),
                    application_rate: None,
                    deposition_efficiency: None,
                    voltage: x.voltage,
                };
                EvaluatedExperiment::new(
                    (x.controllable, x.powder),
                    m,
                    &ConstraintSpec::default(),
                    &CostConfig::default(),
                    "t",
                )
                .unwrap()
            })
            .collect()
    }

    pub fn random_pool(rng: &mut ChaCha8Rng, n: usize) -> CandidatePool {
        let bounds = DomainBounds::default();
        CandidatePool::new(
            (0..n).map(|_| random_input(rng, &bounds)).collect(),
            &CostConfig::default(),
        )
    }

    /// Re-derives a batch selection step by step: the posterior of every model is
    /// recomputed from scratch by explicit inversion on the history plus the fantasy
    /// points chosen so far. Returns the chosen pool indices.
    pub fn dense_step_selection(
        history: &[EvaluatedExperiment],
        pool: &CandidatePool,
        ctx: &ProposalContext<'_>,
    ) -> Vec<usize> {
        assert_eq!(ctx.optimizer.fantasy, FantasyMode::Mean);
        let models =
            fit_constraint_models(history, ctx.spec, ctx.bounds, ctx.model, ctx.seed).unwrap();
        let incumbent = best_feasible(history, pool.max_cost());
        let improvement: Vec<f64> = pool
            .costs
            .iter()
            .map(|c| (incumbent.cost - c).max(0.0))
            .collect();
        let pi = ctx.optimizer.pi;

        // Per model: scaled inputs and standardized targets, extended with fantasies.
        let mut sets: Vec<(Vec<Vec<f64>>, Vec<f64>)> = models
            .iter()
            .map(|m| {
                let s = m.scaling();
                let xs = m.data().inputs().iter().map(|x| s.scale_input(x)).collect();
                let ys = m
                    .data()
                    .targets()
                    .iter()
                    .map(|y| s.scale_target(*y))
                    .collect();
                (xs, ys)
            })
            .collect();
        let latent = |k: usize, sets: &[(Vec<Vec<f64>>, Vec<f64>)], i: usize| -> (f64, f64) {
            let m = &models[k];
            let q = m.scaling().scale_input(&pool.candidates[i].features());
            let mean = |x: &[f64]| m.mean().eval(x).unwrap();
            dense_posterior(&sets[k].0, &sets[k].1, m.kernel(), &mean, &q)
        };

        let mut chosen = Vec::new();
        for _ in 0..ctx.optimizer.batch_size {
            let mut best: Option<(usize, f64, f64)> = None;
            let mut scores = Vec::new();
            for i in (0..pool.len()).filter(|i| !chosen.contains(i)) {
                let preds: Vec<PosteriorPrediction> = (0..models.len())
                    .map(|k| {
                        let (m, v) = latent(k, &sets, i);
                        let s = models[k].scaling();
                        PosteriorPrediction {
                            mean: s.unscale_target(m),
                            variance: v.max(0.0) * s.target_scale * s.target_scale,
                        }
                    })
                    .collect();
                let fp = feasibility_probability(&preds, ctx.spec).unwrap();
                let fip = if improvement[i] > 0.0 { fp } else { 0.0 };
                scores.push((i, fp, fip, (fp - pi) * improvement[i]));
            }
            let hfi = incumbent.is_feasible() && scores.iter().any(|s| s.2 > pi);
            for &(i, fp, fip, h) in &scores {
                let a = if hfi { h } else { fip };
                let better = match best {
                    None => true,
                    Some((j, ba, bfp)) => {
                        a > ba
                            || (a == ba
                                && (fp > bfp || (fp == bfp && pool.costs[i] < pool.costs[j])))
                    }
                };
                if better {
                    best = Some((i, a, fp));
                }
            }
            let star = best.unwrap().0;
            for k in 0..models.len() {
                let (m, _) = latent(k, &sets, star);
                let q = models[k]
                    .scaling()
                    .scale_input(&pool.candidates[star].features());
                sets[k].0.push(q);
                sets[k].1.push(m);
            }
            chosen.push(star);
        }
        chosen
    }
}
