//! Exact-inference Gaussian process regression with a cached Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::KernelParams;
use super::mean::MeanFunction;
use crate::error::{Error, Result};

/// Jitter starts at this fraction of the signal variance...
const JITTER_START: f64 = 1e-10;
/// ...and is escalated tenfold up to this fraction before giving up.
const JITTER_MAX: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Paired training inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let dim = inputs.first().map(Vec::len).ok_or_else(|| {
            Error::invalid("dataset without inputs has no dimension; use Dataset::empty")
        })?;
        let mut data = Dataset::empty(dim);
        if inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        for (x, y) in inputs.into_iter().zip(targets) {
            data.push(x, y)?;
        }
        Ok(data)
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "dataset is {}-dimensional, got input of length {}",
                self.dim,
                x.len()
            )));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset entries must be finite"));
        }
        self.inputs.push(x);
        self.targets.push(y);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Affine maps taking raw inputs and targets into the space the model works in.
///
/// Inputs are mapped with `(x - offset) / scale` per dimension, targets with
/// `(y - mean) / scale`. Kernel and mean hyperparameters live in the mapped space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            input_offset: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    /// Inputs to `[0, 1]` using domain bounds, targets to zero mean and unit variance.
    pub fn from_bounds(lower: &[f64], upper: &[f64], targets: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid("lower and upper bounds differ in length"));
        }
        let mut scale = Vec::with_capacity(lower.len());
        for (lo, hi) in lower.iter().zip(upper) {
            if !(hi > lo) {
                return Err(Error::invalid(format!("empty bound interval [{lo}, {hi}]")));
            }
            scale.push(hi - lo);
        }
        let (target_mean, target_scale) = target_moments(targets);
        Ok(Standardization {
            input_offset: lower.to_vec(),
            input_scale: scale,
            target_mean,
            target_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.input_offset.len()
    }

    pub fn scale_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_offset)
            .zip(&self.input_scale)
            .map(|((v, o), s)| (v - o) / s)
            .collect()
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale
    }

    pub fn unscale_target(&self, y: f64) -> f64 {
        y * self.target_scale + self.target_mean
    }
}

/// Sample mean and standard deviation; a degenerate spread falls back to 1.
fn target_moments(targets: &[f64]) -> (f64, f64) {
    if targets.is_empty() {
        return (0.0, 1.0);
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 1e-12 * mean.abs().max(1.0) {
        (mean, sd)
    } else {
        (mean, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorPrediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

pub const GP_FORMAT_VERSION: u32 = 1;

/// Serialized form of a [`GpModel`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpDocument {
    pub format_version: u32,
    pub kernel: KernelParams,
    pub mean: MeanFunction,
    pub scaling: Standardization,
    pub data: Dataset,
}

/// A Gaussian process conditioned on a dataset.
///
/// Immutable once built: any change of hyperparameters or data produces a new
/// model, so the cached factor always matches the data it was built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GpDocument", try_from = "GpDocument")]
pub struct GpModel {
    kernel: KernelParams,
    mean: MeanFunction,
    data: Dataset,
    scaling: Standardization,
    scaled_inputs: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
    /// `(K + σ²I)^-1 (y - μ(X))` in standardized units.
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

impl GpModel {
    /// Conditions a GP on `data` without any input or target transformation.
    pub fn new(data: Dataset, kernel: KernelParams, mean: MeanFunction) -> Result<Self> {
        let scaling = Standardization::identity(data.dim());
        Self::with_scaling(data, kernel, mean, scaling)
    }

    pub fn with_scaling(
        data: Dataset,
        kernel: KernelParams,
        mean: MeanFunction,
        scaling: Standardization,
    ) -> Result<Self> {
        kernel.validate()?;
        if kernel.dim() != data.dim() || scaling.dim() != data.dim() {
            return Err(Error::invalid(format!(
                "dimension mismatch: data {}, kernel {}, scaling {}",
                data.dim(),
                kernel.dim(),
                scaling.dim()
            )));
        }
        if let MeanFunction::Linear(p) = &mean {
            p.validate()?;
            if p.dim() != data.dim() {
                return Err(Error::invalid(format!(
                    "mean has {} coefficients for {}-dimensional data",
                    p.dim(),
                    data.dim()
                )));
            }
        }
        let scaled_inputs: Vec<Vec<f64>> = data
            .inputs()
            .iter()
            .map(|x| scaling.scale_input(x))
            .collect();
        let residual = DVector::from_iterator(
            data.len(),
            scaled_inputs
                .iter()
                .zip(data.targets())
                .map(|(x, y)| scaling.scale_target(*y) - mean.eval_unchecked(x)),
        );
        let cov = training_covariance(&kernel, &scaled_inputs);
        let (chol, jitter) = factorize(
            cov,
            kernel.signal_variance,
            "training covariance K(X,X) + noise",
        )?;
        let alpha = chol.solve(&residual);
        let l = chol.unpack();
        let log_det_half: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        let p = data.len() as f64;
        let lml = -0.5 * residual.dot(&alpha) - log_det_half - 0.5 * p * LN_2PI;
        Ok(GpModel {
            kernel,
            mean,
            data,
            scaling,
            scaled_inputs,
            chol: l,
            alpha,
            jitter,
            lml,
        })
    }

    /// Same hyperparameters and scaling, different data.
    pub fn with_data(&self, data: Dataset) -> Result<Self> {
        Self::with_scaling(
            data,
            self.kernel.clone(),
            self.mean.clone(),
            self.scaling.clone(),
        )
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn mean(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn scaling(&self) -> &Standardization {
        &self.scaling
    }

    /// Diagonal jitter that was needed for a successful factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn posterior(&self, query: &[f64]) -> Result<PosteriorPrediction> {
        let mut pred = self.posterior_unclamped(query)?;
        pred.variance = pred.variance.max(0.0);
        Ok(pred)
    }

    /// Like [`posterior`](Self::posterior) but without clamping round-off negatives in the variance.
    pub fn posterior_unclamped(&self, query: &[f64]) -> Result<PosteriorPrediction> {
        if query.len() != self.data.dim() {
            return Err(Error::invalid(format!(
                "query has {} dimensions, model expects {}",
                query.len(),
                self.data.dim()
            )));
        }
        let xs = self.scaling.scale_input(query);
        let (m, v) = self.latent_scaled(&xs);
        let s = self.scaling.target_scale;
        Ok(PosteriorPrediction {
            mean: self.scaling.unscale_target(m),
            variance: v * s * s,
        })
    }

    /// Posterior in standardized units at an already-scaled input.
    pub(crate) fn latent_scaled(&self, xs: &[f64]) -> (f64, f64) {
        let (m, v, _) = self.latent_scaled_with_column(xs);
        (m, v)
    }

    /// Latent mean, variance and `L⁻¹ k(X, x)` at an already-scaled input.
    pub(crate) fn latent_scaled_with_column(&self, xs: &[f64]) -> (f64, f64, Vec<f64>) {
        let n = self.scaled_inputs.len();
        let mut col: Vec<f64> = self
            .scaled_inputs
            .iter()
            .map(|xi| self.kernel.eval_unchecked(xi, xs))
            .collect();
        let mean = self.mean.eval_unchecked(xs)
            + col
                .iter()
                .zip(self.alpha.iter())
                .map(|(k, a)| k * a)
                .sum::<f64>();
        // Column-oriented forward substitution; the factor is stored column-major.
        for j in 0..n {
            let lj = self.chol.column(j);
            col[j] /= lj[j];
            let cj = col[j];
            for i in j + 1..n {
                col[i] -= lj[i] * cj;
            }
        }
        let var = self.kernel.signal_variance - col.iter().map(|v| v * v).sum::<f64>();
        (mean, var, col)
    }

    pub fn to_document(&self) -> GpDocument {
        GpDocument {
            format_version: GP_FORMAT_VERSION,
            kernel: self.kernel.clone(),
            mean: self.mean.clone(),
            scaling: self.scaling.clone(),
            data: self.data.clone(),
        }
    }

    pub fn from_document(doc: GpDocument) -> Result<Self> {
        if doc.format_version != GP_FORMAT_VERSION {
            return Err(Error::MigrationRequired {
                kind: "gp model".into(),
                found: doc.format_version,
                supported: GP_FORMAT_VERSION,
            });
        }
        Self::with_scaling(doc.data, doc.kernel, doc.mean, doc.scaling)
    }
}

impl From<GpModel> for GpDocument {
    fn from(model: GpModel) -> Self {
        model.to_document()
    }
}

impl TryFrom<GpDocument> for GpModel {
    type Error = Error;

    fn try_from(doc: GpDocument) -> Result<Self> {
        GpModel::from_document(doc)
    }
}

pub fn posterior(model: &GpModel, query: &[f64]) -> Result<PosteriorPrediction> {
    model.posterior(query)
}

pub fn log_marginal_likelihood(model: &GpModel) -> Result<f64> {
    if model.data().is_empty() {
        return Err(Error::invalid(
            "log marginal likelihood needs at least one training point",
        ));
    }
    Ok(model.log_marginal_likelihood())
}

pub(crate) fn training_covariance(kernel: &KernelParams, xs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = kernel.eval_unchecked(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = kernel.signal_variance + kernel.noise_variance;
    }
    k
}

/// Cholesky with escalating diagonal jitter. Returns the factor and the jitter used.
pub(crate) fn factorize(
    cov: DMatrix<f64>,
    signal_variance: f64,
    what: &str,
) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = cov.nrows();
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * signal_variance;
        let mut m = cov.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            if c.l_dirty()
                .diagonal()
                .iter()
                .all(|d| d.is_finite() && *d > 0.0)
            {
                return Ok((c, jitter));
            }
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::NumericalFailure {
                matrix: what.to_string(),
                jitter,
            });
        }
        rel *= 10.0;
    }
}
