//! Closed-loop campaign against the simulated process.

use serde::{Deserialize, Serialize};

use super::{
    best_feasible, check_termination, propose_batch, BatchProposal, CandidatePool,
    EvaluatedExperiment, ModelConfig, OptimizerConfig, ProposalContext,
};
use crate::acquisition::{ConstraintSpec, Incumbent, QualityOutput};
use crate::error::{Error, Result};
use crate::oracle::{call_rng, voltage_records, EquipmentState, ProcessOracle};
use crate::process::{
    estimate_offset_repeated, fit_voltage_model, generate_candidates, CandidateScheme,
    ControllableInputs, DomainBounds, InputVector, Powder, DEFAULT_CANDIDATE_COUNT,
};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub constraints: ConstraintSpec,
    pub bounds: DomainBounds,
    pub powder: Powder,
    pub candidate_count: usize,
    pub candidate_scheme: CandidateScheme,
    /// Gun condition during the optimization session.
    pub session: EquipmentState,
    pub ignition_repeats: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            constraints: ConstraintSpec::default(),
            bounds: DomainBounds::default(),
            powder: Powder::A,
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            candidate_scheme: CandidateScheme::default(),
            session: EquipmentState::with_offset(2.0),
            ignition_repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub proposal: BatchProposal,
    pub experiments: Vec<EvaluatedExperiment>,
    /// Incumbent after the batch's results were added.
    pub incumbent: Incumbent,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignTrace {
    pub format_version: u32,
    pub seed: u64,
    pub initial_count: usize,
    pub ignition: ControllableInputs,
    pub ignition_voltage: f64,
    pub voltage_offset: f64,
    pub initial_incumbent: Incumbent,
    pub batches: Vec<BatchRecord>,
    pub terminated: bool,
}

impl CampaignTrace {
    pub fn final_incumbent(&self) -> &Incumbent {
        self.batches
            .last()
            .map_or(&self.initial_incumbent, |b| &b.incumbent)
    }

    /// Index (1-based) of the batch after which termination fired.
    pub fn stopping_batch(&self) -> Option<usize> {
        self.terminated.then_some(self.batches.len())
    }

    pub fn evaluations(&self) -> usize {
        self.batches.iter().map(|b| b.experiments.len()).sum()
    }

    /// 1-based index of the first batch containing a feasible measurement.
    pub fn first_feasible_batch(&self) -> Option<usize> {
        self.batches
            .iter()
            .position(|b| b.experiments.iter().any(|e| e.feasible))
            .map(|i| i + 1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Runs propose → measure → append until termination or `max_batches`.
///
/// The voltage model is fitted on `initial`; the session offset is estimated from an
/// ignition at the first initialization setting and held for the whole run.
pub fn run_simulated_campaign(
    initial: &[EvaluatedExperiment],
    oracle: &ProcessOracle,
    settings: &SimulationSettings,
    seed: u64,
) -> Result<CampaignTrace> {
    settings.optimizer.validate()?;
    settings.bounds.validate()?;
    let first = initial
        .first()
        .ok_or_else(|| Error::invalid("initial history is empty"))?;
    let powder = settings.powder;

    let fit_cfg = super::FitConfig {
        seed,
        ..settings.model.fit.clone()
    };
    let vmodel = fit_voltage_model(&voltage_records(initial), &settings.bounds, &fit_cfg)?;
    let ignition = first.x.controllable;
    let repeats = settings.ignition_repeats.max(1);
    let readings: Vec<f64> = (0..repeats)
        .map(|r| {
            oracle.ignite(
                &ignition,
                powder,
                &settings.session,
                seed.wrapping_mul(1000).wrapping_add(r as u64),
            )
        })
        .collect();
    let offset = estimate_offset_repeated(&vmodel, &ignition, powder, &readings)?;
    let ignition_voltage = readings.iter().sum::<f64>() / repeats as f64;

    let grid = generate_candidates(
        &settings.bounds,
        settings.candidate_count,
        &settings.candidate_scheme,
    )?;
    let base_voltage: Vec<f64> = grid
        .iter()
        .map(|c| vmodel.predict(c, powder).mean)
        .collect();
    let mut available: Vec<bool> = grid
        .iter()
        .map(|c| {
            !initial
                .iter()
                .any(|e| e.x.powder == powder && e.x.controllable == *c)
        })
        .collect();

    let mut history = initial.to_vec();
    let initial_incumbent = best_feasible(&history, max_cost(&grid, oracle));
    let mut trace = CampaignTrace {
        format_version: TRACE_FORMAT_VERSION,
        seed,
        initial_count: initial.len(),
        ignition,
        ignition_voltage,
        voltage_offset: offset,
        initial_incumbent,
        batches: Vec::new(),
        terminated: false,
    };

    for b in 0..settings.optimizer.max_batches {
        let index: Vec<usize> = (0..grid.len()).filter(|i| available[*i]).collect();
        let candidates: Vec<InputVector> = index
            .iter()
            .map(|&i| InputVector {
                controllable: grid[i],
                powder,
                voltage: base_voltage[i] + offset,
            })
            .collect();
        let pool = CandidatePool::new(candidates, &oracle.cost);
        let ctx = ProposalContext {
            spec: &settings.constraints,
            bounds: &settings.bounds,
            optimizer: &settings.optimizer,
            model: &settings.model,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(b as u64),
        };
        let proposal = propose_batch(&history, &pool, &ctx)?;
        let mut rng = call_rng(seed, 1 + b as u64);
        let session_id = format!("sim-{seed}");
        let mut experiments = Vec::with_capacity(proposal.candidates.len());
        for (cand, diag) in proposal.candidates.iter().zip(&proposal.diagnostics) {
            available[index[diag.pool_index]] = false;
            experiments.push(oracle.measure(
                &cand.controllable,
                powder,
                &settings.session,
                &session_id,
                &mut rng,
            )?);
        }
        history.extend(experiments.iter().cloned());
        let terminated = check_termination(&proposal, &settings.optimizer);
        let incumbent = best_feasible(&history, max_cost(&grid, oracle));
        trace.batches.push(BatchRecord {
            batch: b + 1,
            proposal,
            experiments,
            incumbent,
            terminated,
        });
        if terminated {
            trace.terminated = true;
            break;
        }
    }
    Ok(trace)
}

fn max_cost(grid: &[ControllableInputs], oracle: &ProcessOracle) -> f64 {
    grid.iter()
        .map(|c| oracle.cost.eval_unchecked(c))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// One row per evaluated experiment of the campaign.
pub fn write_experiments_csv<W: std::io::Write>(trace: &CampaignTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "batch",
        "candidate",
        "primary_gas_flow",
        "secondary_gas_flow",
        "gun_current",
        "carrier_gas_flow",
        "powder_feed_rate",
        "standoff_distance",
        "powder",
        "voltage_V",
        "microhardness_HV",
        "porosity_pct",
        "feasible",
        "cost",
    ])?;
    for b in &trace.batches {
        for (i, e) in b.experiments.iter().enumerate() {
            let mut row = vec![b.batch.to_string(), i.to_string()];
            row.extend(e.x.controllable.to_array().iter().map(|v| v.to_string()));
            row.push(e.x.powder.to_string());
            row.push(e.measurements.voltage.to_string());
            row.push(e.measurements.microhardness.to_string());
            row.push(e.measurements.porosity.to_string());
            row.push(e.feasible.to_string());
            row.push(e.cost.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-candidate acquisition values and constraint predictions (mean ± 2σ) for each batch.
pub fn write_batches_csv<W: std::io::Write>(trace: &CampaignTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "batch",
        "candidate",
        "acquisition",
        "fp",
        "improvement",
        "alpha_fip",
        "alpha_hfi",
        "cost",
        "microhardness_mean",
        "microhardness_lo2s",
        "microhardness_hi2s",
        "porosity_mean",
        "porosity_lo2s",
        "porosity_hi2s",
        "measured_feasible",
        "incumbent_cost",
    ])?;
    for b in &trace.batches {
        for (i, d) in b.proposal.diagnostics.iter().enumerate() {
            let mut row = vec![
                b.batch.to_string(),
                i.to_string(),
                d.acquisition.to_string(),
                d.fp.to_string(),
                d.improvement.to_string(),
                d.alpha_fip.to_string(),
                d.alpha_hfi.to_string(),
                d.cost.to_string(),
            ];
            for output in [QualityOutput::Microhardness, QualityOutput::Porosity] {
                match d.predictions.iter().find(|p| p.output == output) {
                    Some(p) => {
                        let s = p.variance.sqrt();
                        row.extend(
                            [p.mean, p.mean - 2.0 * s, p.mean + 2.0 * s].map(|v| v.to_string()),
                        );
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            row.push(
                b.experiments
                    .get(i)
                    .map_or(String::new(), |e| e.feasible.to_string()),
            );
            row.push(b.incumbent.cost.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
