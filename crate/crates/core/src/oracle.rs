//! Simulated spray process used for closed-loop studies.
//!
//! A small tanh network maps the 8 model inputs to microhardness and porosity. Gun
//! voltage follows a linear ground truth plus the session's equipment offset, and every
//! measurement carries independent Gaussian noise.

pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{ConstraintSpec, Measurements};
use crate::error::{Error, Result};
use crate::optimizer::EvaluatedExperiment;
use crate::process::{
    ControllableInputs, CostConfig, DomainBounds, InputVector, Powder, VoltageRecord,
    CONTROLLABLE_DIM, INPUT_DIM,
};

pub const ORACLE_FORMAT_VERSION: u32 = 1;

const SHIPPED_WEIGHTS: &str = include_str!("../data/oracle_weights.json");
const SHIPPED_DESIGN: &str = include_str!("../data/initialization_design.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// One-hidden-layer regressor `y = W2 · act(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNet {
    pub activation: Activation,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// `hidden_dim × input_dim`, row-major.
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// `output_dim × hidden_dim`, row-major.
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl SurrogateNet {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.hidden_weights.len(),
                self.hidden_dim * self.input_dim,
                "hidden weights",
            ),
            (self.hidden_bias.len(), self.hidden_dim, "hidden bias"),
            (
                self.output_weights.len(),
                self.output_dim * self.hidden_dim,
                "output weights",
            ),
            (self.output_bias.len(), self.output_dim, "output bias"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::invalid(format!(
                    "{what} has {got} entries, expected {want}"
                )));
            }
        }
        let all = self
            .hidden_weights
            .iter()
            .chain(&self.hidden_bias)
            .chain(&self.output_weights)
            .chain(&self.output_bias);
        if all.into_iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("network weights must be finite"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| {
                let row = &self.hidden_weights[j * self.input_dim..(j + 1) * self.input_dim];
                let z = self.hidden_bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                match self.activation {
                    Activation::Tanh => z.tanh(),
                }
            })
            .collect();
        Ok((0..self.output_dim)
            .map(|k| {
                let row = &self.output_weights[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                self.output_bias[k] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect())
    }
}

/// Gun voltage of an undrifted gun: `V = intercept + Σ a_i x_i + b · powder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageTruth {
    pub intercept: f64,
    pub controllable: [f64; CONTROLLABLE_DIM],
    pub powder: f64,
}

impl VoltageTruth {
    pub fn eval(&self, x: &ControllableInputs, powder: Powder) -> f64 {
        self.intercept
            + self
                .controllable
                .iter()
                .zip(x.to_array())
                .map(|(a, v)| a * v)
                .sum::<f64>()
            + self.powder * powder.code()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTest {
    pub input: [f64; INPUT_DIM],
    pub outputs: Vec<f64>,
}

/// Noiseless scan of the default candidate grid under the drifted scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reachability {
    pub voltage_offset: f64,
    pub powder: Powder,
    pub candidate_count: usize,
    pub sobol_seed: u32,
    pub feasible_count: usize,
    pub min_feasible_cost: f64,
}

/// The shipped weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDocument {
    pub format_version: u32,
    pub net: SurrogateNet,
    pub voltage: VoltageTruth,
    pub self_test: SelfTest,
    pub reachability: Reachability,
    pub bounds: DomainBounds,
    pub cost: CostConfig,
    pub constraints: ConstraintSpec,
}

impl OracleDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != ORACLE_FORMAT_VERSION {
            return Err(Error::MigrationRequired {
                kind: "oracle weights".into(),
                found,
                supported: ORACLE_FORMAT_VERSION,
            });
        }
        let doc: OracleDocument = serde_json::from_value(value)?;
        doc.net.validate()?;
        Ok(doc)
    }

    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_WEIGHTS).expect("shipped oracle weights are valid")
    }

    /// Largest absolute deviation of the forward pass from the stored self-test outputs.
    pub fn self_test_error(&self) -> Result<f64> {
        let out = self.net.forward(&self.self_test.input)?;
        if out.len() != self.self_test.outputs.len() {
            return Err(Error::invalid(
                "self-test output count does not match the network",
            ));
        }
        Ok(out
            .iter()
            .zip(&self.self_test.outputs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// A point of an initialization design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub controllable: ControllableInputs,
    pub powder: Powder,
}

pub fn parse_design_csv(text: &str) -> Result<Vec<DesignPoint>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<DesignRow>() {
        let row = row?;
        out.push(DesignPoint {
            controllable: ControllableInputs::from_array([
                row.primary_gas_flow,
                row.secondary_gas_flow,
                row.gun_current,
                row.carrier_gas_flow,
                row.powder_feed_rate,
                row.standoff_distance,
            ]),
            powder: row.powder,
        });
    }
    Ok(out)
}

pub fn write_design_csv<W: std::io::Write>(design: &[DesignPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in design {
        let c = p.controllable;
        w.serialize(DesignRow {
            primary_gas_flow: c.primary_gas_flow,
            secondary_gas_flow: c.secondary_gas_flow,
            gun_current: c.gun_current,
            carrier_gas_flow: c.carrier_gas_flow,
            powder_feed_rate: c.powder_feed_rate,
            standoff_distance: c.standoff_distance,
            powder: p.powder,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DesignRow {
    primary_gas_flow: f64,
    secondary_gas_flow: f64,
    gun_current: f64,
    carrier_gas_flow: f64,
    powder_feed_rate: f64,
    standoff_distance: f64,
    powder: Powder,
}

/// The shipped 86-run initialization design (13 baseline repeats included).
pub fn shipped_design() -> Vec<DesignPoint> {
    parse_design_csv(SHIPPED_DESIGN).expect("shipped design is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub microhardness_sd: f64,
    pub porosity_sd: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            microhardness_sd: 8.45,
            porosity_sd: 0.54,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            microhardness_sd: 0.0,
            porosity_sd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.microhardness_sd >= 0.0 && self.porosity_sd >= 0.0) {
            return Err(Error::invalid(
                "noise standard deviations must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Gun condition during one session. Voltage readings, at ignition or while spraying,
/// carry `ignition_noise_sd` of Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EquipmentState {
    pub voltage_offset: f64,
    pub ignition_noise_sd: f64,
}

impl EquipmentState {
    pub fn with_offset(voltage_offset: f64) -> Self {
        EquipmentState {
            voltage_offset,
            ignition_noise_sd: 0.0,
        }
    }
}

/// Per-call generator for call `index` under `seed`; calls never share a stream.
pub fn call_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Network, voltage truth and measurement model together.
#[derive(Debug, Clone)]
pub struct ProcessOracle {
    pub net: SurrogateNet,
    pub voltage: VoltageTruth,
    pub noise: NoiseSpec,
    pub constraints: ConstraintSpec,
    pub cost: CostConfig,
}

impl ProcessOracle {
    pub fn new(
        doc: &OracleDocument,
        noise: NoiseSpec,
        constraints: ConstraintSpec,
        cost: CostConfig,
    ) -> Result<Self> {
        doc.net.validate()?;
        noise.validate()?;
        constraints.validate()?;
        cost.validate()?;
        if doc.net.input_dim != INPUT_DIM || doc.net.output_dim != 2 {
            return Err(Error::invalid(
                "oracle network must map 8 inputs to 2 outputs",
            ));
        }
        Ok(ProcessOracle {
            net: doc.net.clone(),
            voltage: doc.voltage.clone(),
            noise,
            constraints,
            cost,
        })
    }

    /// Shipped weights with default noise, constraints and cost.
    pub fn shipped() -> Self {
        let doc = OracleDocument::shipped();
        Self::new(
            &doc,
            NoiseSpec::default(),
            ConstraintSpec::default(),
            CostConfig::default(),
        )
        .expect("shipped oracle is valid")
    }

    /// Noiseless gun voltage in the given session.
    pub fn true_voltage(
        &self,
        x: &ControllableInputs,
        powder: Powder,
        state: &EquipmentState,
    ) -> f64 {
        self.voltage.eval(x, powder) + state.voltage_offset
    }

    /// Noiseless (microhardness, porosity) at a full input vector.
    pub fn forward(&self, x: &InputVector) -> (f64, f64) {
        let y = self
            .net
            .forward(&x.features())
            .expect("input dimension checked at construction");
        (y[0], y[1])
    }

    /// Voltage read at ignition.
    pub fn ignite(
        &self,
        x: &ControllableInputs,
        powder: Powder,
        state: &EquipmentState,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.true_voltage(x, powder, state) + state.ignition_noise_sd * draw(&mut rng)
    }

    /// Runs one experiment. Quality outputs come from the true session voltage; the
    /// reported voltage is that value plus reading noise.
    pub fn measure(
        &self,
        x: &ControllableInputs,
        powder: Powder,
        state: &EquipmentState,
        session_id: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<EvaluatedExperiment> {
        let v_true = self.true_voltage(x, powder, state);
        let input = InputVector {
            controllable: *x,
            powder,
            voltage: v_true,
        };
        let (hv, por) = self.forward(&input);
        let measurements = Measurements {
            microhardness: hv + self.noise.microhardness_sd * draw(rng),
            porosity: por + self.noise.porosity_sd * draw(rng),
            application_rate: None,
            deposition_efficiency: None,
            voltage: v_true + state.ignition_noise_sd * draw(rng),
        };
        EvaluatedExperiment::new(
            (*x, powder),
            measurements,
            &self.constraints,
            &self.cost,
            session_id,
        )
    }

    /// Measures every design point in one baseline session.
    pub fn generate_initialization(
        &self,
        design: &[DesignPoint],
        state: &EquipmentState,
        seed: u64,
    ) -> Result<Vec<EvaluatedExperiment>> {
        if design.is_empty() {
            return Err(Error::invalid("initialization design is empty"));
        }
        let mut rng = call_rng(seed, 0);
        design
            .iter()
            .map(|p| self.measure(&p.controllable, p.powder, state, "init", &mut rng))
            .collect()
    }
}

fn draw(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Ignition and spraying voltages of experiments, for fitting the voltage model.
pub fn voltage_records(history: &[EvaluatedExperiment]) -> Vec<VoltageRecord> {
    history
        .iter()
        .map(|e| VoltageRecord {
            controllable: e.x.controllable,
            powder: e.x.powder,
            voltage: e.measurements.voltage,
        })
        .collect()
}

/// Checks a design sits inside `bounds`.
pub fn check_design(design: &[DesignPoint], bounds: &DomainBounds) -> Result<()> {
    design
        .iter()
        .try_for_each(|p| bounds.check(&p.controllable))
}
