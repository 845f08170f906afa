//! Process-domain models: inputs, the stress-index cost, candidate grids, and the
//! gun-voltage model used to compensate equipment drift between sessions.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    self, Dataset, FitConfig, GpModel, KernelParams, MeanFunction, PosteriorPrediction,
    Standardization,
};

pub const CONTROLLABLE_DIM: usize = 6;
/// Six controllable inputs, powder type and gun voltage.
pub const INPUT_DIM: usize = 8;
pub const SECONDARY_GAS_INDEX: usize = 1;
pub const POWDER_INDEX: usize = 6;
pub const VOLTAGE_INDEX: usize = 7;

pub const CONTROLLABLE_NAMES: [&str; CONTROLLABLE_DIM] = [
    "primary_gas_flow",
    "secondary_gas_flow",
    "gun_current",
    "carrier_gas_flow",
    "powder_feed_rate",
    "standoff_distance",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllableInputs {
    /// NLPM
    pub primary_gas_flow: f64,
    /// NLPM
    pub secondary_gas_flow: f64,
    /// A
    pub gun_current: f64,
    /// NLPM
    pub carrier_gas_flow: f64,
    /// g/min
    pub powder_feed_rate: f64,
    /// mm
    pub standoff_distance: f64,
}

impl ControllableInputs {
    pub fn from_array(v: [f64; CONTROLLABLE_DIM]) -> Self {
        ControllableInputs {
            primary_gas_flow: v[0],
            secondary_gas_flow: v[1],
            gun_current: v[2],
            carrier_gas_flow: v[3],
            powder_feed_rate: v[4],
            standoff_distance: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; CONTROLLABLE_DIM] {
        [
            self.primary_gas_flow,
            self.secondary_gas_flow,
            self.gun_current,
            self.carrier_gas_flow,
            self.powder_feed_rate,
            self.standoff_distance,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Powder {
    A,
    B,
}

impl Powder {
    /// Encoding used as a model input.
    pub fn code(self) -> f64 {
        match self {
            Powder::A => 0.0,
            Powder::B => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        if code == 0.0 {
            Ok(Powder::A)
        } else if code == 1.0 {
            Ok(Powder::B)
        } else {
            Err(Error::invalid(format!(
                "powder code must be 0 or 1, got {code}"
            )))
        }
    }
}

impl fmt::Display for Powder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Powder::A => "A",
            Powder::B => "B",
        })
    }
}

/// Full model input: controllable settings plus the measured (or predicted) state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputVector {
    pub controllable: ControllableInputs,
    pub powder: Powder,
    /// V
    pub voltage: f64,
}

impl InputVector {
    pub fn features(&self) -> [f64; INPUT_DIM] {
        let c = self.controllable.to_array();
        [
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            self.powder.code(),
            self.voltage,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// The bounded domain of controllable inputs, plus the voltage range used for input scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainBounds {
    pub primary_gas_flow: Range,
    pub secondary_gas_flow: Range,
    pub gun_current: Range,
    pub carrier_gas_flow: Range,
    pub powder_feed_rate: Range,
    pub standoff_distance: Range,
    pub voltage: Range,
}

impl Default for DomainBounds {
    /// Placeholder process window; real limits are equipment-specific.
    fn default() -> Self {
        DomainBounds {
            primary_gas_flow: Range::new(38.0, 55.0),
            secondary_gas_flow: Range::new(7.0, 14.0),
            gun_current: Range::new(540.0, 650.0),
            carrier_gas_flow: Range::new(2.0, 5.0),
            powder_feed_rate: Range::new(20.0, 60.0),
            standoff_distance: Range::new(100.0, 160.0),
            voltage: Range::new(50.0, 75.0),
        }
    }
}

impl DomainBounds {
    pub fn controllable(&self) -> [Range; CONTROLLABLE_DIM] {
        [
            self.primary_gas_flow,
            self.secondary_gas_flow,
            self.gun_current,
            self.carrier_gas_flow,
            self.powder_feed_rate,
            self.standoff_distance,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let names = CONTROLLABLE_NAMES
            .iter()
            .copied()
            .chain(std::iter::once("voltage"));
        let ranges = self
            .controllable()
            .into_iter()
            .chain(std::iter::once(self.voltage));
        for (name, r) in names.zip(ranges) {
            if !(r.min.is_finite() && r.max.is_finite() && r.max > r.min) {
                return Err(Error::invalid(format!(
                    "{name} bounds [{}, {}] are inconsistent",
                    r.min, r.max
                )));
            }
        }
        if self.primary_gas_flow.min <= 0.0
            || self.secondary_gas_flow.min <= 0.0
            || self.gun_current.min <= 0.0
        {
            return Err(Error::invalid(
                "gas flows and current must be strictly positive",
            ));
        }
        Ok(())
    }

    pub fn check(&self, x: &ControllableInputs) -> Result<()> {
        for ((name, r), v) in CONTROLLABLE_NAMES
            .iter()
            .zip(self.controllable())
            .zip(x.to_array())
        {
            if !r.contains(v) {
                return Err(Error::invalid(format!(
                    "{name} = {v} outside [{}, {}]",
                    r.min, r.max
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> ControllableInputs {
        ControllableInputs::from_array(self.controllable().map(|r| r.midpoint()))
    }

    /// Lower and upper bounds of the eight model features (powder spans `[0, 1]`).
    pub fn feature_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo: Vec<f64> = self.controllable().iter().map(|r| r.min).collect();
        let mut hi: Vec<f64> = self.controllable().iter().map(|r| r.max).collect();
        lo.extend([0.0, self.voltage.min]);
        hi.extend([1.0, self.voltage.max]);
        (lo, hi)
    }
}

/// Weights and reference values of the stress-index surrogate.
///
/// `S = w_I (I / I_ref)² + w_p (Qp_ref / Qp) + w_s (Qs_ref / Qs)`: gun wear grows with
/// current and falls as plasma gas flows increase. At the reference point `S` equals
/// the sum of the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub version: u32,
    pub current_weight: f64,
    pub primary_gas_weight: f64,
    pub secondary_gas_weight: f64,
    pub reference_current: f64,
    pub reference_primary_gas: f64,
    pub reference_secondary_gas: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            version: 1,
            current_weight: 70.0,
            primary_gas_weight: 15.0,
            secondary_gas_weight: 15.0,
            reference_current: 560.0,
            reference_primary_gas: 45.0,
            reference_secondary_gas: 10.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.current_weight,
            self.primary_gas_weight,
            self.secondary_gas_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("stress-index weights must be non-negative"));
        }
        let refs = [
            self.reference_current,
            self.reference_primary_gas,
            self.reference_secondary_gas,
        ];
        if refs.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::invalid(
                "stress-index reference values must be positive",
            ));
        }
        Ok(())
    }

    pub(crate) fn eval_unchecked(&self, x: &ControllableInputs) -> f64 {
        let i = x.gun_current / self.reference_current;
        self.current_weight * i * i
            + self.primary_gas_weight * (self.reference_primary_gas / x.primary_gas_flow)
            + self.secondary_gas_weight * (self.reference_secondary_gas / x.secondary_gas_flow)
    }
}

/// Deterministic process cost of a controllable setting.
pub fn stress_index(
    x: &ControllableInputs,
    cfg: &CostConfig,
    bounds: &DomainBounds,
) -> Result<f64> {
    bounds.check(x)?;
    Ok(cfg.eval_unchecked(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateScheme {
    /// Owen-scrambled Sobol points.
    Sobol { seed: u32 },
    /// Full Cartesian product of evenly spaced levels per dimension.
    Levels { levels: [usize; CONTROLLABLE_DIM] },
}

impl Default for CandidateScheme {
    fn default() -> Self {
        CandidateScheme::Sobol { seed: 0 }
    }
}

pub const DEFAULT_CANDIDATE_COUNT: usize = 20_000;
const SOBOL_MAX_POINTS: usize = 1 << 16;

/// Space-filling candidate settings inside `bounds`.
///
/// For [`CandidateScheme::Levels`], `count` must equal the product of the levels.
pub fn generate_candidates(
    bounds: &DomainBounds,
    count: usize,
    scheme: &CandidateScheme,
) -> Result<Vec<ControllableInputs>> {
    bounds.validate()?;
    if count == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    let ranges = bounds.controllable();
    match scheme {
        CandidateScheme::Sobol { seed } => {
            if count == 1 {
                return Ok(vec![bounds.midpoint()]);
            }
            if count > SOBOL_MAX_POINTS {
                return Err(Error::invalid(format!(
                    "at most {SOBOL_MAX_POINTS} Sobol candidates supported"
                )));
            }
            Ok((0..count as u32)
                .map(|i| {
                    let mut v = [0.0; CONTROLLABLE_DIM];
                    for (d, r) in ranges.iter().enumerate() {
                        let u = sobol_burley::sample(i, d as u32, *seed) as f64;
                        v[d] = r.min + u * r.width();
                    }
                    ControllableInputs::from_array(v)
                })
                .collect())
        }
        CandidateScheme::Levels { levels } => {
            if levels.iter().any(|l| *l == 0) {
                return Err(Error::invalid("every dimension needs at least one level"));
            }
            let total: usize = levels.iter().product();
            if total != count {
                return Err(Error::invalid(format!(
                    "level grid has {total} points but {count} were requested"
                )));
            }
            let grid: Vec<Vec<f64>> = ranges
                .iter()
                .zip(levels)
                .map(|(r, &n)| {
                    if n == 1 {
                        vec![r.midpoint()]
                    } else {
                        (0..n)
                            .map(|k| r.min + r.width() * k as f64 / (n - 1) as f64)
                            .collect()
                    }
                })
                .collect();
            let mut out = Vec::with_capacity(total);
            for flat in 0..total {
                let mut rem = flat;
                let mut v = [0.0; CONTROLLABLE_DIM];
                for d in (0..CONTROLLABLE_DIM).rev() {
                    v[d] = grid[d][rem % levels[d]];
                    rem /= levels[d];
                }
                out.push(ControllableInputs::from_array(v));
            }
            Ok(out)
        }
    }
}

/// One row per candidate, columns in [`CONTROLLABLE_NAMES`] order.
pub fn write_candidates_csv<W: Write>(candidates: &[ControllableInputs], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONTROLLABLE_NAMES)?;
    for c in candidates {
        w.write_record(c.to_array().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Predicts gun voltage from the controllable inputs and powder of an unchanged gun.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoltageModel {
    gp: GpModel,
}

fn voltage_features(x: &ControllableInputs, powder: Powder) -> Vec<f64> {
    let mut f = x.to_array().to_vec();
    f.push(powder.code());
    f
}

/// One recorded ignition or experiment: settings and the voltage they produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageRecord {
    pub controllable: ControllableInputs,
    pub powder: Powder,
    pub voltage: f64,
}

pub fn fit_voltage_model(
    records: &[VoltageRecord],
    bounds: &DomainBounds,
    config: &FitConfig,
) -> Result<VoltageModel> {
    if records.len() < 2 {
        return Err(Error::invalid("voltage model needs at least 2 records"));
    }
    let inputs = records
        .iter()
        .map(|r| voltage_features(&r.controllable, r.powder))
        .collect();
    let targets: Vec<f64> = records.iter().map(|r| r.voltage).collect();
    let data = Dataset::new(inputs, targets)?;
    let (mut lo, mut hi) = bounds.feature_bounds();
    lo.truncate(CONTROLLABLE_DIM + 1);
    hi.truncate(CONTROLLABLE_DIM + 1);
    let scaling = Standardization::from_bounds(&lo, &hi, data.targets())?;
    let init = KernelParams::isotropic(CONTROLLABLE_DIM + 1, 0.5, 1.0, 0.01)?;
    let gp = gp::fit(&data, &MeanFunction::Zero, &init, scaling, config)?;
    Ok(VoltageModel { gp })
}

impl VoltageModel {
    pub fn predict(&self, x: &ControllableInputs, powder: Powder) -> PosteriorPrediction {
        self.gp
            .posterior(&voltage_features(x, powder))
            .expect("voltage features always have the model dimension")
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }
}

/// `δ = V_b - M_V(x_b)`: how far the gun has drifted from the modeled state.
pub fn estimate_offset(
    model: &VoltageModel,
    x: &ControllableInputs,
    powder: Powder,
    measured: f64,
) -> f64 {
    measured - model.predict(x, powder).mean
}

/// Offset from repeated ignitions at the same setting, using their mean voltage.
pub fn estimate_offset_repeated(
    model: &VoltageModel,
    x: &ControllableInputs,
    powder: Powder,
    measured: &[f64],
) -> Result<f64> {
    if measured.is_empty() {
        return Err(Error::invalid("at least one ignition voltage is required"));
    }
    let avg = measured.iter().sum::<f64>() / measured.len() as f64;
    Ok(estimate_offset(model, x, powder, avg))
}

/// Completes candidate settings into model inputs with drift-corrected voltages.
pub fn expand_candidates(
    candidates: &[ControllableInputs],
    powder: Powder,
    model: &VoltageModel,
    offset: f64,
) -> Vec<InputVector> {
    candidates
        .iter()
        .map(|c| InputVector {
            controllable: *c,
            powder,
            voltage: model.predict(c, powder).mean + offset,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CostConfig {
        CostConfig::default()
    }

    #[test]
    fn stress_index_at_reference_is_weight_sum() {
        let c = cfg();
        let x = ControllableInputs {
            primary_gas_flow: c.reference_primary_gas,
            secondary_gas_flow: c.reference_secondary_gas,
            gun_current: c.reference_current,
            carrier_gas_flow: 3.0,
            powder_feed_rate: 40.0,
            standoff_distance: 130.0,
        };
        let s = stress_index(&x, &c, &DomainBounds::default()).unwrap();
        assert!((s - 100.0).abs() < 1e-12);
    }

    #[test]
    fn stress_index_monotone_in_current_and_gases() {
        let b = DomainBounds::default();
        let base = b.midpoint();
        let s0 = stress_index(&base, &cfg(), &b).unwrap();
        let hot = ControllableInputs {
            gun_current: base.gun_current + 10.0,
            ..base
        };
        assert!(stress_index(&hot, &cfg(), &b).unwrap() > s0);
        let more_primary = ControllableInputs {
            primary_gas_flow: base.primary_gas_flow + 1.0,
            ..base
        };
        assert!(stress_index(&more_primary, &cfg(), &b).unwrap() < s0);
        let more_secondary = ControllableInputs {
            secondary_gas_flow: base.secondary_gas_flow + 1.0,
            ..base
        };
        assert!(stress_index(&more_secondary, &cfg(), &b).unwrap() < s0);
    }

    #[test]
    fn stress_index_rejects_out_of_bounds() {
        let b = DomainBounds::default();
        let x = ControllableInputs {
            gun_current: 10_000.0,
            ..b.midpoint()
        };
        assert_eq!(
            stress_index(&x, &cfg(), &b).unwrap_err().category(),
            "invalid-argument"
        );
    }

    #[test]
    fn single_candidate_is_midpoint() {
        let b = DomainBounds::default();
        let c = generate_candidates(&b, 1, &CandidateScheme::default()).unwrap();
        assert_eq!(c, vec![b.midpoint()]);
    }

    #[test]
    fn inconsistent_bounds_rejected() {
        let b = DomainBounds {
            gun_current: Range::new(600.0, 500.0),
            ..DomainBounds::default()
        };
        assert!(generate_candidates(&b, 10, &CandidateScheme::default()).is_err());
    }

    #[test]
    fn level_grid_covers_corners() {
        let b = DomainBounds::default();
        let c = generate_candidates(&b, 64, &CandidateScheme::Levels { levels: [2; 6] }).unwrap();
        assert_eq!(c.len(), 64);
        assert!(c.contains(&ControllableInputs::from_array(
            b.controllable().map(|r| r.min)
        )));
        assert!(c.contains(&ControllableInputs::from_array(
            b.controllable().map(|r| r.max)
        )));
        assert!(generate_candidates(&b, 63, &CandidateScheme::Levels { levels: [2; 6] }).is_err());
    }

    #[test]
    fn candidates_csv_has_named_columns() {
        let b = DomainBounds::default();
        let mut out = Vec::new();
        write_candidates_csv(&[b.midpoint()], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(
            "primary_gas_flow,secondary_gas_flow,gun_current,carrier_gas_flow,powder_feed_rate,standoff_distance\n"
        ));
        assert_eq!(text.lines().count(), 2);
    }
}
