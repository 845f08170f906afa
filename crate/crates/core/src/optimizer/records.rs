//! Experiment tables: one row per measured run.

use serde::{Deserialize, Serialize};

use super::EvaluatedExperiment;
use crate::acquisition::{ConstraintSpec, Measurements};
use crate::error::{Error, Result};
use crate::process::{ControllableInputs, CostConfig, Powder};

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ExperimentRow {
    primary_gas_flow: f64,
    secondary_gas_flow: f64,
    gun_current: f64,
    carrier_gas_flow: f64,
    powder_feed_rate: f64,
    standoff_distance: f64,
    powder: Powder,
    voltage_V: f64,
    microhardness_HV: f64,
    porosity_pct: f64,
    #[serde(default)]
    application_rate: Option<f64>,
    #[serde(default)]
    deposition_efficiency_pct: Option<f64>,
    #[serde(default)]
    session_id: String,
}

pub fn write_history_csv<W: std::io::Write>(
    experiments: &[EvaluatedExperiment],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in experiments {
        let c = &e.x.controllable;
        w.serialize(ExperimentRow {
            primary_gas_flow: c.primary_gas_flow,
            secondary_gas_flow: c.secondary_gas_flow,
            gun_current: c.gun_current,
            carrier_gas_flow: c.carrier_gas_flow,
            powder_feed_rate: c.powder_feed_rate,
            standoff_distance: c.standoff_distance,
            powder: e.x.powder,
            voltage_V: e.measurements.voltage,
            microhardness_HV: e.measurements.microhardness,
            porosity_pct: e.measurements.porosity,
            application_rate: e.measurements.application_rate,
            deposition_efficiency_pct: e.measurements.deposition_efficiency,
            session_id: e.session_id.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an experiment table; columns beyond the known ones are ignored, so the
/// per-experiment export of a simulated campaign reads back too.
pub fn parse_history_csv(
    text: &str,
    spec: &ConstraintSpec,
    cost: &CostConfig,
) -> Result<Vec<EvaluatedExperiment>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<ExperimentRow>() {
        let r = row?;
        let m = Measurements {
            microhardness: r.microhardness_HV,
            porosity: r.porosity_pct,
            application_rate: r.application_rate,
            deposition_efficiency: r.deposition_efficiency_pct,
            voltage: r.voltage_V,
        };
        let x = ControllableInputs::from_array([
            r.primary_gas_flow,
            r.secondary_gas_flow,
            r.gun_current,
            r.carrier_gas_flow,
            r.powder_feed_rate,
            r.standoff_distance,
        ]);
        if x.to_array()
            .iter()
            .chain([&m.voltage, &m.microhardness, &m.porosity])
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "experiment row {} has a non-finite value",
                out.len() + 2
            )));
        }
        out.push(EvaluatedExperiment::new(
            (x, r.powder),
            m,
            spec,
            cost,
            r.session_id,
        )?);
    }
    Ok(out)
}
