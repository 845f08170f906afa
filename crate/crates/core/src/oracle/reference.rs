//! Builds the shipped oracle weights and initialization design from an analytic ground truth.
//!
//! Hidden units are written in normalized coordinates (`c = 2u - 1` for each controllable,
//! `pp = 2·powder - 1`, `vn = (V - 61) / 4`) and folded into raw-input weights, so the
//! network consumes physical units directly. Microhardness rises with voltage and gun
//! current and falls with secondary gas flow.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    Activation, DesignPoint, NoiseSpec, OracleDocument, Reachability, SelfTest, SurrogateNet,
    VoltageTruth, ORACLE_FORMAT_VERSION,
};
use crate::acquisition::{ConstraintSpec, QualityOutput};
use crate::error::Result;
use crate::process::{
    generate_candidates, CandidateScheme, ControllableInputs, CostConfig, DomainBounds,
    InputVector, Powder, CONTROLLABLE_DIM, DEFAULT_CANDIDATE_COUNT, INPUT_DIM,
};

const VOLTAGE_CENTER: f64 = 61.0;
const VOLTAGE_SCALE: f64 = 4.0;

/// Rows: hidden units. Columns: c0..c5, pp, vn.
const HIDDEN: [[f64; INPUT_DIM]; 7] = [
    [0.1, -0.35, 1.2, 0.0, 0.0, 0.0, 0.0, 0.5],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0],
    [0.0, 0.0, 0.0, -0.3, 0.7, 0.0, 0.0, 0.0],
    [0.7, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.2, 0.0],
    [0.0, 0.0, 0.0, 0.9, -0.4, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.6],
];
const OUTPUT: [[f64; 7]; 2] = [
    [110.0, -45.0, -30.0, 25.0, 20.0, 0.0, 15.0],
    [-2.6, 1.6, 1.8, -0.8, 0.5, 0.4, 0.0],
];
const OUTPUT_BIAS: [f64; 2] = [590.0, 7.5];

/// Voltage in normalized controllable coordinates `u ∈ [0, 1]`.
const VOLTAGE_BASE: f64 = 55.0;
const VOLTAGE_U: [f64; CONTROLLABLE_DIM] = [4.0, 9.0, -1.5, 0.0, 0.0, 0.0];
const VOLTAGE_POWDER: f64 = 0.8;

/// Scenario the reachability scan is run under.
pub const SCENARIO_OFFSET: f64 = 2.0;

/// Initialization points miss at least one band by this many measurement SDs, so noisy
/// re-measurement practically never makes them feasible.
const CLEARANCE_SDS: f64 = 3.5;
const DESIGN_SIZE: usize = 86;
const BASELINE_REPEATS: usize = 13;
const DESIGN_SEED: u64 = 86;
/// Baseline setting: the powder-A design point with in-band porosity closest to this hardness.
const BASELINE_HV: f64 = 600.0;

fn ranges(bounds: &DomainBounds) -> [(f64, f64); CONTROLLABLE_DIM] {
    bounds.controllable().map(|r| (r.min, r.width()))
}

pub fn reference_net(bounds: &DomainBounds) -> SurrogateNet {
    let r = ranges(bounds);
    let mut hidden_weights = Vec::with_capacity(7 * INPUT_DIM);
    let mut hidden_bias = Vec::with_capacity(7);
    for unit in HIDDEN {
        let mut bias = 0.0;
        for d in 0..CONTROLLABLE_DIM {
            // c = 2(x - lo)/w - 1
            let (lo, w) = r[d];
            hidden_weights.push(unit[d] * 2.0 / w);
            bias += unit[d] * (-2.0 * lo / w - 1.0);
        }
        hidden_weights.push(unit[6] * 2.0);
        bias -= unit[6];
        hidden_weights.push(unit[7] / VOLTAGE_SCALE);
        bias -= unit[7] * VOLTAGE_CENTER / VOLTAGE_SCALE;
        hidden_bias.push(bias);
    }
    SurrogateNet {
        activation: Activation::Tanh,
        input_dim: INPUT_DIM,
        hidden_dim: 7,
        output_dim: 2,
        hidden_weights,
        hidden_bias,
        output_weights: OUTPUT.iter().flatten().copied().collect(),
        output_bias: OUTPUT_BIAS.to_vec(),
    }
}

pub fn reference_voltage(bounds: &DomainBounds) -> VoltageTruth {
    let r = ranges(bounds);
    let mut intercept = VOLTAGE_BASE;
    let mut controllable = [0.0; CONTROLLABLE_DIM];
    for d in 0..CONTROLLABLE_DIM {
        let (lo, w) = r[d];
        controllable[d] = VOLTAGE_U[d] / w;
        intercept -= VOLTAGE_U[d] * lo / w;
    }
    VoltageTruth {
        intercept,
        controllable,
        powder: VOLTAGE_POWDER,
    }
}

/// Weight file with its self-test and reachability blocks filled in.
pub fn reference_document() -> Result<OracleDocument> {
    let bounds = DomainBounds::default();
    let cost = CostConfig::default();
    let constraints = ConstraintSpec::default();
    let net = reference_net(&bounds);
    let voltage = reference_voltage(&bounds);

    let mid = bounds.midpoint();
    let self_input = InputVector {
        controllable: mid,
        powder: Powder::A,
        voltage: voltage.eval(&mid, Powder::A),
    }
    .features();
    let self_test = SelfTest {
        input: self_input,
        outputs: net.forward(&self_input)?,
    };

    let sobol_seed = 0;
    let grid = generate_candidates(
        &bounds,
        DEFAULT_CANDIDATE_COUNT,
        &CandidateScheme::Sobol { seed: sobol_seed },
    )?;
    let mut feasible_count = 0;
    let mut min_feasible_cost = f64::INFINITY;
    for c in &grid {
        let v = voltage.eval(c, Powder::A) + SCENARIO_OFFSET;
        let y = net.forward(
            &InputVector {
                controllable: *c,
                powder: Powder::A,
                voltage: v,
            }
            .features(),
        )?;
        if noiseless_feasible(&constraints, y[0], y[1]) {
            feasible_count += 1;
            min_feasible_cost = min_feasible_cost.min(cost.eval_unchecked(c));
        }
    }
    Ok(OracleDocument {
        format_version: ORACLE_FORMAT_VERSION,
        net,
        voltage,
        self_test,
        reachability: Reachability {
            voltage_offset: SCENARIO_OFFSET,
            powder: Powder::A,
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            sobol_seed,
            feasible_count,
            min_feasible_cost,
        },
        bounds,
        cost,
        constraints,
    })
}

fn noiseless_feasible(spec: &ConstraintSpec, hv: f64, porosity: f64) -> bool {
    let m = crate::acquisition::Measurements {
        microhardness: hv,
        porosity,
        application_rate: None,
        deposition_efficiency: None,
        voltage: 0.0,
    };
    spec.is_satisfied(&m).unwrap_or(false)
}

fn levels(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// The 86-run design: a level grid filtered to clearly infeasible settings, a baseline
/// setting repeated 13 times, and a seeded shuffle.
pub fn reference_design(doc: &OracleDocument) -> Vec<DesignPoint> {
    let bounds = &doc.bounds;
    let r = bounds.controllable();
    let axes: [Vec<f64>; CONTROLLABLE_DIM] = [
        levels(2),
        levels(3),
        levels(4),
        levels(2),
        levels(3),
        levels(3),
    ];
    let mut grid: Vec<(DesignPoint, f64, f64)> = Vec::new();
    for powder in [Powder::A, Powder::B] {
        let mut idx = [0usize; CONTROLLABLE_DIM];
        loop {
            let mut x = [0.0; CONTROLLABLE_DIM];
            for d in 0..CONTROLLABLE_DIM {
                x[d] = r[d].min + axes[d][idx[d]] * r[d].width();
            }
            let c = ControllableInputs::from_array(x);
            let v = doc.voltage.eval(&c, powder);
            let y = doc
                .net
                .forward(
                    &InputVector {
                        controllable: c,
                        powder,
                        voltage: v,
                    }
                    .features(),
                )
                .expect("reference network has 8 inputs");
            grid.push((
                DesignPoint {
                    controllable: c,
                    powder,
                },
                y[0],
                y[1],
            ));
            let mut d = 0;
            while d < CONTROLLABLE_DIM {
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == CONTROLLABLE_DIM {
                break;
            }
        }
    }
    let noise = NoiseSpec::default();
    let band = |o: QualityOutput, sd: f64| {
        let b = doc
            .constraints
            .bands
            .iter()
            .find(|b| b.output == o)
            .expect("default bands cover both outputs");
        (b.lower - CLEARANCE_SDS * sd)..=(b.upper + CLEARANCE_SDS * sd)
    };
    let hv_near = band(QualityOutput::Microhardness, noise.microhardness_sd);
    let por_near = band(QualityOutput::Porosity, noise.porosity_sd);
    let clear = |hv: f64, p: f64| !hv_near.contains(&hv) || !por_near.contains(&p);
    let kept: Vec<(DesignPoint, f64, f64)> = grid
        .into_iter()
        .filter(|(_, hv, p)| clear(*hv, *p))
        .collect();

    let baseline = kept
        .iter()
        .filter(|(d, _, p)| d.powder == Powder::A && (6.5..=7.7).contains(p))
        .min_by(|a, b| {
            (a.1 - BASELINE_HV)
                .abs()
                .total_cmp(&(b.1 - BASELINE_HV).abs())
        })
        .map(|(d, _, _)| *d)
        .expect("level grid contains a baseline candidate");

    let mut rng = ChaCha8Rng::seed_from_u64(DESIGN_SEED);
    let mut others: Vec<DesignPoint> = kept
        .iter()
        .map(|(d, _, _)| *d)
        .filter(|d| *d != baseline)
        .collect();
    others.shuffle(&mut rng);
    others.truncate(DESIGN_SIZE - BASELINE_REPEATS);
    let mut design = others;
    design.extend(std::iter::repeat_n(baseline, BASELINE_REPEATS));
    design.shuffle(&mut rng);
    design
}
