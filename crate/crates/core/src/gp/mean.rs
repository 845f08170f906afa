//! Linear mean functions with per-coefficient sign constraints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConstraint {
    /// Coefficient must stay `<= 0`.
    Negative,
    /// Coefficient must stay `>= 0`.
    Positive,
    /// Coefficient pinned at zero.
    Fixed,
    Free,
}

impl SignConstraint {
    pub fn admits(self, value: f64) -> bool {
        match self {
            SignConstraint::Negative => value <= 0.0,
            SignConstraint::Positive => value >= 0.0,
            SignConstraint::Fixed => value == 0.0,
            SignConstraint::Free => value.is_finite(),
        }
    }

    /// Bounds used when the coefficient is optimized; `None` for pinned coefficients.
    pub(crate) fn bounds(self, magnitude: f64) -> Option<(f64, f64)> {
        match self {
            SignConstraint::Negative => Some((-magnitude, 0.0)),
            SignConstraint::Positive => Some((0.0, magnitude)),
            SignConstraint::Fixed => None,
            SignConstraint::Free => Some((-magnitude, magnitude)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMeanParams {
    pub coefficients: Vec<f64>,
    pub sign_mask: Vec<SignConstraint>,
}

impl LinearMeanParams {
    pub fn new(coefficients: Vec<f64>, sign_mask: Vec<SignConstraint>) -> Result<Self> {
        let params = LinearMeanParams {
            coefficients,
            sign_mask,
        };
        params.validate()?;
        Ok(params)
    }

    /// All coefficients start at zero.
    pub fn zeros(sign_mask: Vec<SignConstraint>) -> Self {
        LinearMeanParams {
            coefficients: vec![0.0; sign_mask.len()],
            sign_mask,
        }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.sign_mask.len() {
            return Err(Error::invalid(format!(
                "{} mean coefficients but {} sign constraints",
                self.coefficients.len(),
                self.sign_mask.len()
            )));
        }
        for (i, (c, s)) in self.coefficients.iter().zip(&self.sign_mask).enumerate() {
            if !s.admits(*c) {
                return Err(Error::invalid(format!(
                    "mean coefficient {i} = {c} violates its {s:?} constraint"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "mean expects {}-dimensional input, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(g, v)| g * v).sum()
    }
}

/// Dot product of the mean coefficients with `x`.
pub fn mean_eval(x: &[f64], mean: &LinearMeanParams) -> Result<f64> {
    mean.eval(x)
}

/// Prior mean of a Gaussian process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Linear(LinearMeanParams),
}

impl MeanFunction {
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Linear(p) => p.eval_unchecked(x),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            MeanFunction::Zero => Ok(0.0),
            MeanFunction::Linear(p) => p.eval(x),
        }
    }

    pub fn linear(&self) -> Option<&LinearMeanParams> {
        match self {
            MeanFunction::Zero => None,
            MeanFunction::Linear(p) => Some(p),
        }
    }
}
