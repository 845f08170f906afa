//! Posterior over a fixed candidate pool, updated in place as fantasy points are added.
//!
//! Holds `V = L⁻¹ K(X, U)` column by column. Appending a training point `x*` extends the
//! Cholesky factor by one row, which adds one entry to every column of `V` and lowers
//! each candidate's variance by the square of that entry.

use crate::gp::{GpModel, PosteriorPrediction};

pub(crate) struct PoolPosterior<'a> {
    model: &'a GpModel,
    scaled: Vec<Vec<f64>>,
    columns: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl<'a> PoolPosterior<'a> {
    pub(crate) fn new(model: &'a GpModel, candidates: &[[f64; crate::process::INPUT_DIM]]) -> Self {
        let scaling = model.scaling();
        let scaled: Vec<Vec<f64>> = candidates.iter().map(|c| scaling.scale_input(c)).collect();
        let mut columns = Vec::with_capacity(scaled.len());
        let mut mean = Vec::with_capacity(scaled.len());
        let mut var = Vec::with_capacity(scaled.len());
        for xs in &scaled {
            let (m, v, col) = model.latent_scaled_with_column(xs);
            mean.push(m);
            var.push(v);
            columns.push(col);
        }
        PoolPosterior {
            model,
            scaled,
            columns,
            mean,
            var,
        }
    }

    /// Physical-unit posterior of candidate `i`, variance clamped at zero.
    pub(crate) fn prediction(&self, i: usize) -> PosteriorPrediction {
        let s = self.model.scaling();
        PosteriorPrediction {
            mean: s.unscale_target(self.mean[i]),
            variance: self.var[i].max(0.0) * s.target_scale * s.target_scale,
        }
    }

    /// Latent mean and variance of candidate `i` in standardized units.
    pub(crate) fn latent(&self, i: usize) -> (f64, f64) {
        (self.mean[i], self.var[i])
    }

    /// Conditions on candidate `star` having produced `target` (standardized units).
    pub(crate) fn add_observation(&mut self, star: usize, target: f64, active: &[bool]) {
        let kernel = self.model.kernel();
        let d2 = self.var[star] + kernel.noise_variance + self.model.jitter();
        let d = d2.max(f64::MIN_POSITIVE).sqrt();
        let innovation = (target - self.mean[star]) / d;
        let star_col = self.columns[star].clone();
        let star_x = self.scaled[star].clone();
        for i in 0..self.columns.len() {
            if !active[i] && i != star {
                continue;
            }
            let k = kernel.eval_unchecked(&star_x, &self.scaled[i]);
            let dot: f64 = star_col
                .iter()
                .zip(&self.columns[i])
                .map(|(a, b)| a * b)
                .sum();
            let w = (k - dot) / d;
            self.var[i] -= w * w;
            self.mean[i] += w * innovation;
            self.columns[i].push(w);
        }
    }
}
