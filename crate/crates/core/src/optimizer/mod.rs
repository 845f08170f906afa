//! Batch proposal by sequential selection with virtual data-set expansion.

mod pool;
mod records;
mod simulate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    feasibility_probability, improvement, select_candidate, Acquisition, ConstraintSpec, Incumbent,
    Measurements, QualityOutput, ScoredCandidate, SelectionPolicy,
};
use crate::error::{Error, Result};
use crate::gp::{
    self, Dataset, FitConfig, GpModel, KernelParams, LinearMeanParams, MeanFunction,
    PosteriorPrediction, SignConstraint, Standardization,
};
use crate::process::{
    CostConfig, DomainBounds, InputVector, INPUT_DIM, SECONDARY_GAS_INDEX, VOLTAGE_INDEX,
};
use pool::PoolPosterior;

pub use records::{parse_history_csv, write_history_csv};
pub use simulate::{
    run_simulated_campaign, write_batches_csv, write_experiments_csv, BatchRecord, CampaignTrace,
    SimulationSettings, TRACE_FORMAT_VERSION,
};

/// One experiment that was actually run and measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedExperiment {
    pub x: InputVector,
    pub measurements: Measurements,
    pub feasible: bool,
    pub cost: f64,
    pub session_id: String,
}

impl EvaluatedExperiment {
    /// Builds the record, deriving feasibility and cost from the measurements and inputs.
    pub fn new(
        controllable_and_powder: (crate::process::ControllableInputs, crate::process::Powder),
        measurements: Measurements,
        spec: &ConstraintSpec,
        cost: &CostConfig,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        let (controllable, powder) = controllable_and_powder;
        let x = InputVector {
            controllable,
            powder,
            voltage: measurements.voltage,
        };
        Ok(EvaluatedExperiment {
            x,
            feasible: spec.is_satisfied(&measurements)?,
            cost: cost.eval_unchecked(&controllable),
            measurements,
            session_id: session_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FantasyMode {
    /// Expand the virtual set with the posterior mean.
    #[default]
    Mean,
    /// Expand with a draw from the latent posterior.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    /// Confidence threshold π.
    pub pi: f64,
    /// Termination threshold ε on α_FIP.
    pub epsilon: f64,
    pub max_batches: usize,
    pub fantasy: FantasyMode,
    /// Re-fit hyperparameters on every virtual expansion instead of once per batch.
    pub refit_on_virtual: bool,
    pub hfi_requires_confidence: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            batch_size: 5,
            pi: 0.4,
            epsilon: 0.05,
            max_batches: 20,
            fantasy: FantasyMode::Mean,
            refit_on_virtual: false,
            hfi_requires_confidence: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::invalid(format!(
                "threshold π = {} outside [0, 1]",
                self.pi
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "termination ε = {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            pi: self.pi,
            hfi_requires_confidence: self.hfi_requires_confidence,
        }
    }
}

/// How the constraint GPs are built from experiment history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub fit: FitConfig,
    /// Sign-constrained linear mean (secondary gas ≤ 0, voltage ≥ 0) for microhardness.
    pub hybrid_microhardness: bool,
    pub initial_lengthscale: f64,
    pub initial_signal_variance: f64,
    pub initial_noise_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fit: FitConfig::default(),
            hybrid_microhardness: true,
            initial_lengthscale: 0.5,
            initial_signal_variance: 1.0,
            initial_noise_variance: 0.1,
        }
    }
}

/// Sign mask of the microhardness mean: negative on secondary gas flow, positive on voltage.
pub fn microhardness_mean() -> LinearMeanParams {
    let mut mask = vec![SignConstraint::Fixed; INPUT_DIM];
    mask[SECONDARY_GAS_INDEX] = SignConstraint::Negative;
    mask[VOLTAGE_INDEX] = SignConstraint::Positive;
    LinearMeanParams::zeros(mask)
}

impl ModelConfig {
    pub fn mean_for(&self, output: QualityOutput) -> MeanFunction {
        if self.hybrid_microhardness && output == QualityOutput::Microhardness {
            MeanFunction::Linear(microhardness_mean())
        } else {
            MeanFunction::Zero
        }
    }

    pub fn initial_kernel(&self) -> Result<KernelParams> {
        KernelParams::isotropic(
            INPUT_DIM,
            self.initial_lengthscale,
            self.initial_signal_variance,
            self.initial_noise_variance,
        )
    }

    fn with_seed(&self, seed: u64) -> FitConfig {
        FitConfig {
            seed,
            ..self.fit.clone()
        }
    }
}

/// Dataset of one quality output over the experiment history.
pub fn output_dataset(history: &[EvaluatedExperiment], output: QualityOutput) -> Result<Dataset> {
    let mut data = Dataset::empty(INPUT_DIM);
    for e in history {
        let y = e
            .measurements
            .get(output)
            .ok_or_else(|| Error::invalid(format!("experiment lacks a {output} measurement")))?;
        data.push(e.x.features().to_vec(), y)?;
    }
    Ok(data)
}

/// Fits one GP for `output` on `data`.
pub fn fit_output_model(
    data: &Dataset,
    output: QualityOutput,
    bounds: &DomainBounds,
    model: &ModelConfig,
    seed: u64,
) -> Result<GpModel> {
    let (lo, hi) = bounds.feature_bounds();
    let scaling = Standardization::from_bounds(&lo, &hi, data.targets())?;
    gp::fit(
        data,
        &model.mean_for(output),
        &model.initial_kernel()?,
        scaling,
        &model.with_seed(seed),
    )
}

/// Fits one GP per constrained output, in constraint order.
pub fn fit_constraint_models(
    history: &[EvaluatedExperiment],
    spec: &ConstraintSpec,
    bounds: &DomainBounds,
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<GpModel>> {
    spec.outputs()
        .enumerate()
        .map(|(k, output)| {
            let data = output_dataset(history, output)?;
            fit_output_model(&data, output, bounds, model, seed.wrapping_add(k as u64))
        })
        .collect()
}

/// Candidate set `U` together with each member's cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<InputVector>,
    pub costs: Vec<f64>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<InputVector>, cost: &CostConfig) -> Self {
        let costs = candidates
            .iter()
            .map(|c| cost.eval_unchecked(&c.controllable))
            .collect();
        CandidatePool { candidates, costs }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn max_cost(&self) -> f64 {
        self.costs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputPrediction {
    pub output: QualityOutput,
    pub mean: f64,
    pub variance: f64,
}

/// Why a candidate was picked, as seen at the moment of its selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDiagnostics {
    pub pool_index: usize,
    pub cost: f64,
    pub fp: f64,
    pub improvement: f64,
    pub alpha_fip: f64,
    pub alpha_hfi: f64,
    pub acquisition: Acquisition,
    pub predictions: Vec<OutputPrediction>,
}

impl CandidateDiagnostics {
    /// Value of the acquisition function that selected this candidate.
    pub fn alpha(&self) -> f64 {
        match self.acquisition {
            Acquisition::Fip => self.alpha_fip,
            Acquisition::Hfi => self.alpha_hfi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub candidates: Vec<InputVector>,
    pub diagnostics: Vec<CandidateDiagnostics>,
    /// α_FIP of each selected candidate, used by the termination test.
    pub fip_values: Vec<f64>,
    pub incumbent: Incumbent,
}

/// Cheapest feasible experiment; ties keep the earlier one. Falls back to
/// `max_candidate_cost + 1` when nothing feasible has been measured.
pub fn best_feasible(history: &[EvaluatedExperiment], max_candidate_cost: f64) -> Incumbent {
    let mut best: Option<&EvaluatedExperiment> = None;
    for e in history.iter().filter(|e| e.feasible) {
        if best.is_none_or(|b| e.cost < b.cost) {
            best = Some(e);
        }
    }
    match best {
        Some(e) => Incumbent {
            point: Some(e.x),
            cost: e.cost,
        },
        None => Incumbent::fallback(max_candidate_cost),
    }
}

/// True when at least half of the batch (rounded up) has α_FIP below ε.
pub fn check_termination(proposal: &BatchProposal, config: &OptimizerConfig) -> bool {
    let below = proposal
        .fip_values
        .iter()
        .filter(|v| **v < config.epsilon)
        .count();
    below >= config.batch_size.div_ceil(2)
}

/// Everything `propose_batch` needs besides history and pool.
#[derive(Debug, Clone)]
pub struct ProposalContext<'a> {
    pub spec: &'a ConstraintSpec,
    pub bounds: &'a DomainBounds,
    pub optimizer: &'a OptimizerConfig,
    pub model: &'a ModelConfig,
    pub seed: u64,
}

/// Selects `batch_size` candidates from `pool`.
///
/// Improvements are computed once from the incumbent of `history`. Each selection
/// scores every remaining candidate's feasibility probability, picks one with
/// [`select_candidate`], and appends it with a fantasized outcome to a private copy of
/// the data, so later selections see the reduced uncertainty. `history` is not touched.
pub fn propose_batch(
    history: &[EvaluatedExperiment],
    pool: &CandidatePool,
    ctx: &ProposalContext<'_>,
) -> Result<BatchProposal> {
    let cfg = ctx.optimizer;
    cfg.validate()?;
    ctx.spec.validate()?;
    if pool.candidates.len() != pool.costs.len() {
        return Err(Error::invalid("pool candidates and costs differ in length"));
    }
    if pool.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "pool has {} candidates, batch needs {}",
            pool.len(),
            cfg.batch_size
        )));
    }
    let incumbent = best_feasible(history, pool.max_cost());
    let improvements: Vec<f64> = pool
        .costs
        .iter()
        .map(|c| improvement(*c, &incumbent))
        .collect();
    let models = fit_constraint_models(history, ctx.spec, ctx.bounds, ctx.model, ctx.seed)?;
    let features: Vec<[f64; INPUT_DIM]> =
        pool.candidates.iter().map(InputVector::features).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x5eed_fa57);

    let mut chooser = Chooser {
        pool,
        improvements: &improvements,
        incumbent: &incumbent,
        spec: ctx.spec,
        policy: cfg.policy(),
        active: vec![true; pool.len()],
        proposal: BatchProposal {
            candidates: Vec::with_capacity(cfg.batch_size),
            diagnostics: Vec::with_capacity(cfg.batch_size),
            fip_values: Vec::with_capacity(cfg.batch_size),
            incumbent,
        },
    };

    if cfg.refit_on_virtual {
        let mut virtual_history: Vec<Dataset> = ctx
            .spec
            .outputs()
            .map(|o| output_dataset(history, o))
            .collect::<Result<_>>()?;
        let mut models = models;
        for step in 0..cfg.batch_size {
            if step > 0 {
                models = ctx
                    .spec
                    .outputs()
                    .zip(&virtual_history)
                    .enumerate()
                    .map(|(k, (o, d))| {
                        fit_output_model(
                            d,
                            o,
                            ctx.bounds,
                            ctx.model,
                            ctx.seed.wrapping_add(k as u64),
                        )
                    })
                    .collect::<Result<_>>()?;
            }
            let predictions = |i: usize| -> Vec<PosteriorPrediction> {
                models
                    .iter()
                    .map(|m| {
                        m.posterior(&features[i])
                            .expect("pool features match model")
                    })
                    .collect()
            };
            let star = chooser.select(&predictions)?;
            for (k, model) in models.iter().enumerate() {
                let pred = model.posterior(&features[star])?;
                let y = fantasy_value(cfg.fantasy, pred.mean, pred.variance, &mut rng);
                virtual_history[k].push(features[star].to_vec(), y)?;
            }
        }
    } else {
        let mut posteriors: Vec<PoolPosterior<'_>> = models
            .iter()
            .map(|m| PoolPosterior::new(m, &features))
            .collect();
        for _ in 0..cfg.batch_size {
            let predictions = |i: usize| -> Vec<PosteriorPrediction> {
                posteriors.iter().map(|p| p.prediction(i)).collect()
            };
            let star = chooser.select(&predictions)?;
            for post in posteriors.iter_mut() {
                let (m, v) = post.latent(star);
                let y = fantasy_value(cfg.fantasy, m, v, &mut rng);
                post.add_observation(star, y, &chooser.active);
            }
        }
    }
    Ok(chooser.proposal)
}

fn fantasy_value(mode: FantasyMode, mean: f64, variance: f64, rng: &mut ChaCha8Rng) -> f64 {
    match mode {
        FantasyMode::Mean => mean,
        FantasyMode::Sample => {
            let z: f64 = StandardNormal.sample(rng);
            mean + variance.max(0.0).sqrt() * z
        }
    }
}

/// Sequential selection state shared by both virtual-expansion strategies.
struct Chooser<'p> {
    pool: &'p CandidatePool,
    improvements: &'p [f64],
    incumbent: &'p Incumbent,
    spec: &'p ConstraintSpec,
    policy: SelectionPolicy,
    active: Vec<bool>,
    proposal: BatchProposal,
}

impl Chooser<'_> {
    fn select(&mut self, predictions: &dyn Fn(usize) -> Vec<PosteriorPrediction>) -> Result<usize> {
        let mut indices = Vec::new();
        let mut scored = Vec::new();
        for (i, active) in self.active.iter().enumerate() {
            if !active {
                continue;
            }
            let fp = feasibility_probability(&predictions(i), self.spec)?;
            indices.push(i);
            scored.push(ScoredCandidate::score(
                self.pool.candidates[i],
                self.pool.costs[i],
                self.improvements[i],
                fp,
                self.policy.pi,
            ));
        }
        let sel = select_candidate(&scored, self.incumbent.is_feasible(), &self.policy)?;
        let star = indices[sel.index];
        let c = &scored[sel.index];
        let preds = predictions(star);
        self.proposal.candidates.push(self.pool.candidates[star]);
        self.proposal.fip_values.push(c.alpha_fip);
        self.proposal.diagnostics.push(CandidateDiagnostics {
            pool_index: star,
            cost: c.cost,
            fp: c.fp,
            improvement: c.improvement,
            alpha_fip: c.alpha_fip,
            alpha_hfi: c.alpha_hfi,
            acquisition: sel.acquisition,
            predictions: self
                .spec
                .outputs()
                .zip(preds)
                .map(|(output, p)| OutputPrediction {
                    output,
                    mean: p.mean,
                    variance: p.variance,
                })
                .collect(),
        });
        self.active[star] = false;
        Ok(star)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{ControllableInputs, Powder};

    fn experiment(cost: f64, feasible: bool) -> EvaluatedExperiment {
        EvaluatedExperiment {
            x: InputVector {
                controllable: ControllableInputs::from_array([45.0, 10.0, cost, 3.0, 40.0, 130.0]),
                powder: Powder::A,
                voltage: 60.0,
            },
            measurements: Measurements {
                microhardness: 650.0,
                porosity: 7.0,
                application_rate: None,
                deposition_efficiency: None,
                voltage: 60.0,
            },
            feasible,
            cost,
            session_id: "s".into(),
        }
    }

    fn proposal(fips: &[f64]) -> BatchProposal {
        BatchProposal {
            candidates: Vec::new(),
            diagnostics: Vec::new(),
            fip_values: fips.to_vec(),
            incumbent: Incumbent::fallback(0.0),
        }
    }

    #[test]
    fn termination_examples() {
        let cfg = OptimizerConfig::default();
        assert!(check_termination(
            &proposal(&[0.04, 0.3, 0.02, 0.01, 0.5]),
            &cfg
        ));
        assert!(!check_termination(&proposal(&[0.5; 5]), &cfg));
        let four = OptimizerConfig {
            batch_size: 4,
            ..cfg
        };
        assert!(check_termination(&proposal(&[0.01, 0.02, 0.5, 0.6]), &four));
        assert!(!check_termination(&proposal(&[0.01, 0.5, 0.5, 0.6]), &four));
    }

    #[test]
    fn best_feasible_examples() {
        let h = [
            experiment(120.3, true),
            experiment(104.0, true),
            experiment(90.0, false),
        ];
        assert_eq!(best_feasible(&h, 200.0).cost, 104.0);
        let none = [experiment(90.0, false)];
        let inc = best_feasible(&none, 150.0);
        assert_eq!(inc.cost, 151.0);
        assert!(inc.point.is_none());
        let mut first = experiment(104.0, true);
        first.session_id = "first".into();
        let tie = [
            experiment(130.0, true),
            first.clone(),
            experiment(104.0, true),
        ];
        assert_eq!(best_feasible(&tie, 200.0).point, Some(first.x));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            pi: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn microhardness_mask() {
        let m = microhardness_mean();
        assert_eq!(m.sign_mask[SECONDARY_GAS_INDEX], SignConstraint::Negative);
        assert_eq!(m.sign_mask[VOLTAGE_INDEX], SignConstraint::Positive);
        assert_eq!(
            m.sign_mask
                .iter()
                .filter(|s| **s == SignConstraint::Fixed)
                .count(),
            6
        );
        assert!(m.coefficients.iter().all(|c| *c == 0.0));
    }
}
