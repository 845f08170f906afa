//! Gaussian process surrogates for the quality outputs.

mod fit;
mod kernel;
mod mean;
mod model;

pub use fit::{fit, FitConfig};
pub use kernel::{kernel_eval, KernelParams};
pub use mean::{mean_eval, LinearMeanParams, MeanFunction, SignConstraint};
pub use model::{
    log_marginal_likelihood, posterior, Dataset, GpDocument, GpModel, PosteriorPrediction,
    Standardization, GP_FORMAT_VERSION,
};
