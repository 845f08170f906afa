//! Marginal-likelihood fitting of kernel and mean hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel::KernelParams;
use super::mean::{LinearMeanParams, MeanFunction, SignConstraint};
use super::model::{factorize, Dataset, GpModel, Standardization};
use crate::error::{Error, Result};
use crate::optim::minimize_box;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Search box and effort for hyperparameter fitting. Bounds are in standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub seed: u64,
    pub lengthscale_bounds: (f64, f64),
    pub signal_variance_bounds: (f64, f64),
    pub noise_variance_bounds: (f64, f64),
    /// Largest magnitude a mean coefficient may take, in standardized target units per
    /// unit of scaled input. With inputs scaled to `[0, 1]`, 2 lets the mean move the
    /// prediction by at most two target standard deviations across an input's range;
    /// looser bounds let a trend along collinear inputs run away when extrapolating.
    pub mean_coefficient_bound: f64,
    pub max_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 3,
            seed: 0,
            lengthscale_bounds: (1e-3, 1e3),
            signal_variance_bounds: (1e-4, 1e4),
            noise_variance_bounds: (1e-8, 10.0),
            mean_coefficient_bound: 2.0,
            max_iterations: 150,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::invalid("fitting needs at least one restart"));
        }
        for (name, (lo, hi)) in [
            ("lengthscale", self.lengthscale_bounds),
            ("signal variance", self.signal_variance_bounds),
            ("noise variance", self.noise_variance_bounds),
        ] {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::invalid(format!("bad {name} bounds [{lo}, {hi}]")));
            }
        }
        if !(self.mean_coefficient_bound > 0.0) {
            return Err(Error::invalid("mean coefficient bound must be positive"));
        }
        Ok(())
    }
}

/// Layout of the optimization vector:
/// `[ln ℓ_1..ln ℓ_d, ln s², ln σ², γ_j for every non-fixed mean coefficient j]`.
struct Layout {
    dim: usize,
    mean_slots: Vec<usize>,
    mask: Option<Vec<SignConstraint>>,
}

impl Layout {
    fn len(&self) -> usize {
        self.dim + 2 + self.mean_slots.len()
    }

    fn bounds(&self, cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.len());
        let mut hi = Vec::with_capacity(self.len());
        for _ in 0..self.dim {
            lo.push(cfg.lengthscale_bounds.0.ln());
            hi.push(cfg.lengthscale_bounds.1.ln());
        }
        lo.push(cfg.signal_variance_bounds.0.ln());
        hi.push(cfg.signal_variance_bounds.1.ln());
        lo.push(cfg.noise_variance_bounds.0.ln());
        hi.push(cfg.noise_variance_bounds.1.ln());
        if let Some(mask) = &self.mask {
            for &j in &self.mean_slots {
                let (l, h) = mask[j]
                    .bounds(cfg.mean_coefficient_bound)
                    .expect("slot is not fixed");
                lo.push(l);
                hi.push(h);
            }
        }
        (lo, hi)
    }

    fn encode(&self, kernel: &KernelParams, mean: &MeanFunction) -> Vec<f64> {
        let mut z: Vec<f64> = kernel.lengthscales.iter().map(|l| l.ln()).collect();
        z.push(kernel.signal_variance.ln());
        // ln(0) would leave the box; the lower bound takes over after projection.
        z.push(kernel.noise_variance.max(f64::MIN_POSITIVE).ln());
        if let MeanFunction::Linear(p) = mean {
            for &j in &self.mean_slots {
                z.push(p.coefficients[j]);
            }
        }
        z
    }

    fn decode(&self, z: &[f64]) -> (KernelParams, MeanFunction) {
        let kernel = KernelParams {
            lengthscales: z[..self.dim].iter().map(|v| v.exp()).collect(),
            signal_variance: z[self.dim].exp(),
            noise_variance: z[self.dim + 1].exp(),
        };
        let mean = match &self.mask {
            None => MeanFunction::Zero,
            Some(mask) => {
                let mut coefficients = vec![0.0; self.dim];
                for (k, &j) in self.mean_slots.iter().enumerate() {
                    coefficients[j] = z[self.dim + 2 + k];
                }
                MeanFunction::Linear(LinearMeanParams {
                    coefficients,
                    sign_mask: mask.clone(),
                })
            }
        };
        (kernel, mean)
    }
}

/// Negative log marginal likelihood and its gradient with respect to the layout vector.
struct Objective<'a> {
    layout: &'a Layout,
    xs: Vec<Vec<f64>>,
    ys: DVector<f64>,
    /// Squared coordinate differences, one `p x p` matrix per input dimension.
    sq_diffs: Vec<DMatrix<f64>>,
}

impl<'a> Objective<'a> {
    fn new(layout: &'a Layout, xs: Vec<Vec<f64>>, ys: DVector<f64>) -> Self {
        let p = xs.len();
        let sq_diffs = (0..layout.dim)
            .map(|d| DMatrix::from_fn(p, p, |i, j| (xs[i][d] - xs[j][d]).powi(2)))
            .collect();
        Objective {
            layout,
            xs,
            ys,
            sq_diffs,
        }
    }

    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (kernel, mean) = self.layout.decode(z);
        let p = self.xs.len();
        let dim = self.layout.dim;
        let inv_l2: Vec<f64> = kernel.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();

        let mut kse = DMatrix::zeros(p, p);
        for i in 0..p {
            kse[(i, i)] = kernel.signal_variance;
            for j in 0..i {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += self.sq_diffs[d][(i, j)] * inv_l2[d];
                }
                let v = kernel.signal_variance * (-0.5 * acc).exp();
                kse[(i, j)] = v;
                kse[(j, i)] = v;
            }
        }
        let mut cov = kse.clone();
        for i in 0..p {
            cov[(i, i)] += kernel.noise_variance;
        }
        let (chol, _) = factorize(
            cov,
            kernel.signal_variance,
            "training covariance during fitting",
        )?;
        let residual = DVector::from_iterator(
            p,
            self.xs
                .iter()
                .zip(self.ys.iter())
                .map(|(x, y)| y - mean.eval_unchecked(x)),
        );
        let alpha = chol.solve(&residual);
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * residual.dot(&alpha) - log_det_half - 0.5 * p as f64 * LN_2PI;

        // W = αα^T - K^-1; dLML/dθ = ½ tr(W dK/dθ)
        let mut w = chol.inverse();
        w.neg_mut();
        w.ger(1.0, &alpha, &alpha, 1.0);

        let mut grad = vec![0.0; self.layout.len()];
        let mut wk = w.clone();
        wk.component_mul_assign(&kse);
        for d in 0..dim {
            let s: f64 = wk
                .iter()
                .zip(self.sq_diffs[d].iter())
                .map(|(a, b)| a * b)
                .sum();
            grad[d] = 0.5 * s * inv_l2[d];
        }
        grad[dim] = 0.5 * wk.sum();
        grad[dim + 1] = 0.5 * kernel.noise_variance * w.trace();
        for (k, &j) in self.layout.mean_slots.iter().enumerate() {
            grad[dim + 2 + k] = self
                .xs
                .iter()
                .zip(alpha.iter())
                .map(|(x, a)| x[j] * a)
                .sum();
        }
        for g in grad.iter_mut() {
            *g = -*g;
        }
        Ok((-lml, grad))
    }
}

/// Fits kernel and mean hyperparameters by maximizing the log marginal likelihood.
///
/// Restart 0 starts at `init`; further restarts perturb it randomly. Sign-constrained
/// mean coefficients are optimized inside their half-line, so the mask holds on the
/// result by construction.
pub fn fit(
    data: &Dataset,
    mean: &MeanFunction,
    init: &KernelParams,
    scaling: Standardization,
    config: &FitConfig,
) -> Result<GpModel> {
    config.validate()?;
    init.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid(format!(
            "fitting needs at least 2 points, got {}",
            data.len()
        )));
    }
    if init.dim() != data.dim() || scaling.dim() != data.dim() {
        return Err(Error::invalid(
            "initial kernel, scaling and data dimensions differ",
        ));
    }
    let layout = match mean {
        MeanFunction::Zero => Layout {
            dim: data.dim(),
            mean_slots: Vec::new(),
            mask: None,
        },
        MeanFunction::Linear(p) => {
            p.validate()?;
            if p.dim() != data.dim() {
                return Err(Error::invalid("mean and data dimensions differ"));
            }
            Layout {
                dim: data.dim(),
                mean_slots: (0..p.dim())
                    .filter(|&j| p.sign_mask[j] != SignConstraint::Fixed)
                    .collect(),
                mask: Some(p.sign_mask.clone()),
            }
        }
    };

    let xs: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|x| scaling.scale_input(x))
        .collect();
    let ys = DVector::from_iterator(
        data.len(),
        data.targets().iter().map(|y| scaling.scale_target(*y)),
    );
    let objective = Objective::new(&layout, xs, ys);
    let (lower, upper) = layout.bounds(config);
    let start = layout.encode(init, mean);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut diagnostics = Vec::new();
    for restart in 0..config.restarts {
        let mut z0 = start.clone();
        if restart > 0 {
            for v in z0[..layout.dim].iter_mut() {
                *v += rng.random_range(-1.5..1.5);
            }
            z0[layout.dim] += rng.random_range(-1.0..1.0);
            z0[layout.dim + 1] += rng.random_range(-2.0..2.0);
        }
        let result = minimize_box(
            |z| objective.eval(z).ok(),
            &z0,
            &lower,
            &upper,
            config.max_iterations,
            1e-6,
        );
        match result {
            Ok(m) => {
                if best.as_ref().is_none_or(|(v, _)| m.value < *v) {
                    best = Some((m.value, m.x));
                }
            }
            Err(msg) => diagnostics.push(msg),
        }
    }
    let Some((_, z)) = best else {
        return Err(Error::FittingFailure(diagnostics));
    };
    let (mut kernel, mean) = layout.decode(&z);
    // exp(ln b) can land an ulp outside the box.
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
    for l in kernel.lengthscales.iter_mut() {
        *l = clamp(*l, config.lengthscale_bounds);
    }
    kernel.signal_variance = clamp(kernel.signal_variance, config.signal_variance_bounds);
    kernel.noise_variance = clamp(kernel.noise_variance, config.noise_variance_bounds);
    GpModel::with_scaling(data.clone(), kernel, mean, scaling)
}
