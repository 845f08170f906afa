//! Squared-exponential kernel with one lengthscale per input dimension (ARD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    /// Measurement noise variance, added on the diagonal of the training covariance.
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let params = KernelParams {
            lengthscales,
            signal_variance,
            noise_variance,
        };
        params.validate()?;
        Ok(params)
    }

    /// Equal lengthscales in every dimension.
    pub fn isotropic(
        dim: usize,
        lengthscale: f64,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        Self::new(vec![lengthscale; dim], signal_variance, noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::invalid(format!(
                "lengthscale must be positive, got {l}"
            )));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(Error::invalid(format!(
                "kernel expects {}-dimensional inputs, got {} and {}",
                self.dim(),
                a.len(),
                b.len()
            )));
        }
        Ok(self.eval_unchecked(a, b))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sq = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let r = (x - y) / l;
            sq += r * r;
        }
        self.signal_variance * (-0.5 * sq).exp()
    }
}

/// `k(a, b) = s² exp(-½ Σ_d ((a_d - b_d) / ℓ_d)²)`
pub fn kernel_eval(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    params.eval(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[f64], b: &[f64], p: &KernelParams) -> f64 {
        let mut acc = 0.0;
        for d in 0..a.len() {
            acc += (a[d] - b[d]).powi(2) / p.lengthscales[d].powi(2);
        }
        p.signal_variance * f64::exp(-acc / 2.0)
    }

    #[test]
    fn zero_distance_returns_signal_variance() {
        let p = KernelParams::isotropic(8, 0.7, 2.5, 0.1).unwrap();
        let x = [0.3, 1.0, -2.0, 4.0, 0.0, 0.5, 1.0, 60.0];
        assert_eq!(kernel_eval(&x, &x, &p).unwrap(), 2.5);
    }

    #[test]
    fn unit_distance_in_one_dimension() {
        let p = KernelParams::isotropic(8, 1.0, 1.0, 0.0).unwrap();
        let mut a = [0.0; 8];
        a[0] = 1.0;
        let k = kernel_eval(&a, &[0.0; 8], &p).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = KernelParams::isotropic(8, 1.0, 1.0, 0.0).unwrap();
        let err = kernel_eval(&[0.0; 7], &[0.0; 8], &p).unwrap_err();
        assert_eq!(err.category(), "invalid-argument");
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(KernelParams::new(vec![1.0, 0.0], 1.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], -1.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], 1.0, -1e-3).is_err());
    }

    proptest! {
        #[test]
        fn matches_naive_loop(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            ls in prop::collection::vec(0.05f64..10.0, 8),
            sv in 0.01f64..100.0,
        ) {
            let p = KernelParams::new(ls, sv, 0.0).unwrap();
            let k = kernel_eval(&a, &b, &p).unwrap();
            prop_assert!((k - naive(&a, &b, &p)).abs() <= 1e-12 * sv.max(1.0));
            prop_assert_eq!(k, kernel_eval(&b, &a, &p).unwrap());
        }
    }
}
