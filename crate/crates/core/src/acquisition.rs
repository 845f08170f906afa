//! Improvement, feasibility probability and the FIP/HFI candidate-selection policy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::PosteriorPrediction;
use crate::process::InputVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityOutput {
    Microhardness,
    Porosity,
    ApplicationRate,
    DepositionEfficiency,
}

impl QualityOutput {
    pub fn unit(self) -> &'static str {
        match self {
            QualityOutput::Microhardness => "HV",
            QualityOutput::Porosity => "%",
            QualityOutput::ApplicationRate => "um/pass",
            QualityOutput::DepositionEfficiency => "%",
        }
    }
}

impl fmt::Display for QualityOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityOutput::Microhardness => "microhardness",
            QualityOutput::Porosity => "porosity",
            QualityOutput::ApplicationRate => "application_rate",
            QualityOutput::DepositionEfficiency => "deposition_efficiency",
        })
    }
}

/// Measured coating properties and the gun voltage observed while spraying.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub microhardness: f64,
    pub porosity: f64,
    pub application_rate: Option<f64>,
    pub deposition_efficiency: Option<f64>,
    pub voltage: f64,
}

impl Measurements {
    pub fn get(&self, output: QualityOutput) -> Option<f64> {
        match output {
            QualityOutput::Microhardness => Some(self.microhardness),
            QualityOutput::Porosity => Some(self.porosity),
            QualityOutput::ApplicationRate => self.application_rate,
            QualityOutput::DepositionEfficiency => self.deposition_efficiency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBand {
    pub output: QualityOutput,
    pub lower: f64,
    pub upper: f64,
}

impl ConstraintBand {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// Acceptance bands on the constrained quality outputs, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub bands: Vec<ConstraintBand>,
}

impl Default for ConstraintSpec {
    /// Microhardness 635-675 HV and porosity 6-8.2 %.
    fn default() -> Self {
        ConstraintSpec {
            bands: vec![
                ConstraintBand {
                    output: QualityOutput::Microhardness,
                    lower: 635.0,
                    upper: 675.0,
                },
                ConstraintBand {
                    output: QualityOutput::Porosity,
                    lower: 6.0,
                    upper: 8.2,
                },
            ],
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::invalid("at least one constraint band is required"));
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.lower < b.upper) {
                return Err(Error::invalid(format!(
                    "{} band [{}, {}] is empty",
                    b.output, b.lower, b.upper
                )));
            }
            if self.bands[..i].iter().any(|o| o.output == b.output) {
                return Err(Error::invalid(format!("{} constrained twice", b.output)));
            }
        }
        Ok(())
    }

    pub fn outputs(&self) -> impl Iterator<Item = QualityOutput> + '_ {
        self.bands.iter().map(|b| b.output)
    }

    /// Whether every constrained measurement lies inside its band.
    pub fn is_satisfied(&self, m: &Measurements) -> Result<bool> {
        let mut ok = true;
        for b in &self.bands {
            let v = m
                .get(b.output)
                .ok_or_else(|| Error::invalid(format!("measurement of {} missing", b.output)))?;
            ok &= b.contains(v);
        }
        Ok(ok)
    }
}

/// Cheapest feasible point so far, or the fallback anchor when none is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub point: Option<InputVector>,
    pub cost: f64,
}

impl Incumbent {
    /// No feasible point yet: anchor one unit above the most expensive candidate.
    pub fn fallback(max_candidate_cost: f64) -> Self {
        Incumbent {
            point: None,
            cost: max_candidate_cost + 1.0,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.point.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub x: InputVector,
    pub cost: f64,
    pub improvement: f64,
    pub fp: f64,
    pub alpha_fip: f64,
    pub alpha_hfi: f64,
}

impl ScoredCandidate {
    pub fn score(x: InputVector, cost: f64, improvement: f64, fp: f64, pi: f64) -> Self {
        ScoredCandidate {
            x,
            cost,
            improvement,
            fp,
            alpha_fip: alpha_fip(fp, improvement),
            alpha_hfi: alpha_hfi(fp, improvement, pi),
        }
    }
}

/// `max{0, S(x+) - S(x)}`
pub fn improvement(cost: f64, incumbent: &Incumbent) -> f64 {
    (incumbent.cost - cost).max(0.0)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Pr[lower <= c <= upper]` for `c ~ N(mean, variance)`.
pub fn band_probability(pred: &PosteriorPrediction, lower: f64, upper: f64) -> f64 {
    let sd = pred.std_dev();
    if sd == 0.0 {
        return if pred.mean >= lower && pred.mean <= upper {
            1.0
        } else {
            0.0
        };
    }
    let zl = (lower - pred.mean) / sd;
    let zu = (upper - pred.mean) / sd;
    // Difference of upper tails when both are above the mean avoids cancellation.
    let p = if zl > 0.0 {
        normal_cdf(-zl) - normal_cdf(-zu)
    } else {
        normal_cdf(zu) - normal_cdf(zl)
    };
    p.clamp(0.0, 1.0)
}

/// Product over independent constraints of each band probability.
pub fn feasibility_probability(
    predictions: &[PosteriorPrediction],
    spec: &ConstraintSpec,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid(
            "feasibility probability needs at least one prediction",
        ));
    }
    if predictions.len() != spec.bands.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} constraints",
            predictions.len(),
            spec.bands.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(&spec.bands)
        .map(|(p, b)| band_probability(p, b.lower, b.upper))
        .product())
}

/// `FP · sgn(I)` with `sgn(0) = 0`.
pub fn alpha_fip(fp: f64, improvement: f64) -> f64 {
    if improvement > 0.0 {
        fp
    } else {
        0.0
    }
}

/// `(FP - π) · I`
pub fn alpha_hfi(fp: f64, improvement: f64, pi: f64) -> f64 {
    (fp - pi) * improvement
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    Fip,
    Hfi,
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Acquisition::Fip => "fip",
            Acquisition::Hfi => "hfi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Confidence threshold π gating the switch to HFI.
    pub pi: f64,
    /// Restrict the HFI argmax to candidates whose α_FIP exceeds π.
    pub hfi_requires_confidence: bool,
}

impl SelectionPolicy {
    pub fn new(pi: f64) -> Self {
        SelectionPolicy {
            pi,
            hfi_requires_confidence: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub acquisition: Acquisition,
}

/// Picks the next candidate.
///
/// Without a known feasible point, maximizes α_FIP. Otherwise, if any candidate has
/// α_FIP > π, maximizes α_HFI over the pool; else falls back to α_FIP. Ties go to the
/// higher feasibility probability, then the lower cost, then the earlier index.
pub fn select_candidate(
    pool: &[ScoredCandidate],
    any_feasible_known: bool,
    policy: &SelectionPolicy,
) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot select from an empty candidate pool"));
    }
    let acquisition = if any_feasible_known && pool.iter().any(|c| c.alpha_fip > policy.pi) {
        Acquisition::Hfi
    } else {
        Acquisition::Fip
    };
    let eligible = |c: &ScoredCandidate| {
        !(acquisition == Acquisition::Hfi && policy.hfi_requires_confidence)
            || c.alpha_fip > policy.pi
    };
    let value = |c: &ScoredCandidate| match acquisition {
        Acquisition::Fip => c.alpha_fip,
        Acquisition::Hfi => c.alpha_hfi,
    };
    let index = pool
        .iter()
        .enumerate()
        .filter(|(_, c)| eligible(c))
        .max_by(|(i, a), (j, b)| {
            value(a)
                .total_cmp(&value(b))
                .then(a.fp.total_cmp(&b.fp))
                .then(b.cost.total_cmp(&a.cost))
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .expect("HFI branch always has an eligible candidate");
    Ok(Selection { index, acquisition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{ControllableInputs, Powder};
    use proptest::prelude::*;

    fn dummy_x() -> InputVector {
        InputVector {
            controllable: ControllableInputs::from_array([45.0, 10.0, 600.0, 3.0, 40.0, 130.0]),
            powder: Powder::A,
            voltage: 60.0,
        }
    }

    fn cand(cost: f64, improvement: f64, fp: f64, pi: f64) -> ScoredCandidate {
        ScoredCandidate::score(dummy_x(), cost, improvement, fp, pi)
    }

    fn incumbent(cost: f64) -> Incumbent {
        Incumbent {
            point: Some(dummy_x()),
            cost,
        }
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(110.0, &incumbent(120.3)) - 10.3).abs() < 1e-12);
        assert_eq!(improvement(120.3, &incumbent(120.3)), 0.0);
        assert_eq!(improvement(130.0, &incumbent(120.3)), 0.0);
    }

    #[test]
    fn fallback_incumbent_is_max_plus_one() {
        let inc = Incumbent::fallback(150.0);
        assert_eq!(inc.cost, 151.0);
        assert!(!inc.is_feasible());
    }

    #[test]
    fn degenerate_prediction_inside_band() {
        let spec = ConstraintSpec {
            bands: vec![ConstraintBand {
                output: QualityOutput::Porosity,
                lower: 6.0,
                upper: 8.2,
            }],
        };
        let p = PosteriorPrediction {
            mean: 7.1,
            variance: 0.0,
        };
        assert_eq!(feasibility_probability(&[p], &spec).unwrap(), 1.0);
        let tiny = PosteriorPrediction {
            mean: 7.1,
            variance: 1e-20,
        };
        assert_eq!(feasibility_probability(&[tiny], &spec).unwrap(), 1.0);
        let outside = PosteriorPrediction {
            mean: 9.0,
            variance: 0.0,
        };
        assert_eq!(feasibility_probability(&[outside], &spec).unwrap(), 0.0);
    }

    #[test]
    fn product_of_two_band_probabilities() {
        // Band [m - z sd, m + z sd] at z = Φ^-1(0.9) has probability 0.8; a one-sided band
        // [mean, ∞) has 0.5.
        let z = 1.281_551_565_544_600_4;
        let spec = ConstraintSpec {
            bands: vec![
                ConstraintBand {
                    output: QualityOutput::Microhardness,
                    lower: 650.0 - 10.0 * z,
                    upper: 650.0 + 10.0 * z,
                },
                ConstraintBand {
                    output: QualityOutput::Porosity,
                    lower: 7.0,
                    upper: 1e9,
                },
            ],
        };
        let preds = [
            PosteriorPrediction {
                mean: 650.0,
                variance: 100.0,
            },
            PosteriorPrediction {
                mean: 7.0,
                variance: 1.0,
            },
        ];
        let fp = feasibility_probability(&preds, &spec).unwrap();
        assert!((fp - 0.4).abs() < 1e-9, "{fp}");
    }

    #[test]
    fn empty_predictions_rejected() {
        assert!(feasibility_probability(&[], &ConstraintSpec::default()).is_err());
    }

    #[test]
    fn acquisition_value_examples() {
        assert_eq!(alpha_fip(0.7, 10.0), 0.7);
        assert_eq!(alpha_fip(0.7, 0.0), 0.0);
        assert_eq!(alpha_fip(0.0, 5.0), 0.0);
        assert!((alpha_hfi(0.9, 10.0, 0.4) - 5.0).abs() < 1e-12);
        assert_eq!(alpha_hfi(0.4, 12.0, 0.4), 0.0);
        assert!((alpha_hfi(0.2, 10.0, 0.4) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(ConstraintSpec::default().validate().is_ok());
        let mut bad = ConstraintSpec::default();
        bad.bands[0].upper = bad.bands[0].lower;
        assert!(bad.validate().is_err());
        let mut dup = ConstraintSpec::default();
        dup.bands[1].output = QualityOutput::Microhardness;
        assert!(dup.validate().is_err());
    }

    #[test]
    fn tie_breaks_by_fp_then_cost_then_index() {
        let policy = SelectionPolicy::new(0.4);
        // All improvement zero: α_FIP ties at 0; fp decides.
        let pool = [
            cand(100.0, 0.0, 0.3, 0.4),
            cand(100.0, 0.0, 0.6, 0.4),
            cand(90.0, 0.0, 0.6, 0.4),
        ];
        assert_eq!(select_candidate(&pool, false, &policy).unwrap().index, 2);
        let pool = [cand(100.0, 0.0, 0.6, 0.4), cand(100.0, 0.0, 0.6, 0.4)];
        assert_eq!(select_candidate(&pool, false, &policy).unwrap().index, 0);
    }

    #[test]
    fn restricted_hfi_only_considers_confident_candidates() {
        let mut policy = SelectionPolicy::new(0.4);
        // HFI argmax over the whole pool is the big improvement at fp 0.45 (α_FIP 0.45 > π)...
        let pool = [
            cand(80.0, 40.0, 0.45, 0.4),
            cand(110.0, 10.0, 0.9, 0.4),
            cand(70.0, 50.0, 0.35, 0.4),
        ];
        let sel = select_candidate(&pool, true, &policy).unwrap();
        assert_eq!(
            sel,
            Selection {
                index: 1,
                acquisition: Acquisition::Hfi
            }
        );
        policy.hfi_requires_confidence = true;
        let pool = [
            cand(80.0, 40.0, 0.41, 0.4),
            cand(110.0, 10.0, 0.5, 0.4),
            cand(60.0, 100.0, 0.39, 0.4),
        ];
        let open = select_candidate(&pool, true, &SelectionPolicy::new(0.4)).unwrap();
        let restricted = select_candidate(&pool, true, &policy).unwrap();
        assert_eq!(open.index, 1);
        assert_eq!(restricted.index, 1);
        let pool = [cand(80.0, 40.0, 0.41, 0.4), cand(50.0, 300.0, 0.399, 0.4)];
        assert_eq!(
            select_candidate(&pool, true, &SelectionPolicy::new(0.4))
                .unwrap()
                .index,
            0
        );
        assert_eq!(select_candidate(&pool, true, &policy).unwrap().index, 0);
    }

    proptest! {
        #[test]
        fn fp_is_a_probability_and_a_product(
            m1 in 500.0f64..800.0, s1 in 0.0f64..80.0,
            m2 in 2.0f64..14.0, s2 in 0.0f64..4.0,
        ) {
            let spec = ConstraintSpec::default();
            let preds = [
                PosteriorPrediction { mean: m1, variance: s1 * s1 },
                PosteriorPrediction { mean: m2, variance: s2 * s2 },
            ];
            let fp = feasibility_probability(&preds, &spec).unwrap();
            prop_assert!((0.0..=1.0).contains(&fp));
            let single = |i: usize| feasibility_probability(
                &preds[i..=i],
                &ConstraintSpec { bands: vec![spec.bands[i]] },
            ).unwrap();
            prop_assert!((fp - single(0) * single(1)).abs() <= 1e-12);
        }

        #[test]
        fn widening_a_band_never_lowers_fp(
            m in -5.0f64..5.0, s in 0.0f64..3.0,
            lo in -4.0f64..0.0, hi in 0.0f64..4.0,
            dl in 0.0f64..2.0, du in 0.0f64..2.0,
        ) {
            let p = PosteriorPrediction { mean: m, variance: s * s };
            prop_assert!(band_probability(&p, lo - dl, hi + du) >= band_probability(&p, lo, hi));
        }

        #[test]
        fn selection_invariant_under_monotone_transform(
            fps in prop::collection::vec(0.0f64..1.0, 1..30),
            imps in prop::collection::vec(0.0f64..50.0, 30),
            feasible in any::<bool>(),
        ) {
            let pi = 0.4;
            let pool: Vec<_> = fps.iter().zip(&imps).map(|(f, i)| cand(100.0 - i, *i, *f, pi)).collect();
            let sel = select_candidate(&pool, feasible, &SelectionPolicy::new(pi)).unwrap();
            // Strictly increasing map applied to the active acquisition value only; the FIP
            // map stays below π so it cannot flip the HFI gate.
            let mapped: Vec<_> = pool.iter().map(|c| {
                let mut c = *c;
                match sel.acquisition {
                    Acquisition::Fip => c.alpha_fip = pi * c.alpha_fip / (1.0 + c.alpha_fip),
                    Acquisition::Hfi => c.alpha_hfi = 2.0 * c.alpha_hfi + 7.0,
                }
                c
            }).collect();
            let again = select_candidate(&mapped, feasible, &SelectionPolicy::new(pi)).unwrap();
            prop_assert_eq!(sel.index, again.index);
        }

        #[test]
        fn never_picks_non_improving_when_an_improving_candidate_is_possible(
            fps in prop::collection::vec(0.01f64..1.0, 2..30),
            imps in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..50.0], 30),
            feasible in any::<bool>(),
        ) {
            let pi = 0.4;
            let pool: Vec<_> = fps.iter().zip(&imps).map(|(f, i)| cand(100.0 - i, *i, *f, pi)).collect();
            prop_assume!(pool.iter().any(|c| c.improvement > 0.0));
            let sel = select_candidate(&pool, feasible, &SelectionPolicy::new(pi)).unwrap();
            prop_assert!(pool[sel.index].improvement > 0.0);
            if !feasible {
                let best = pool.iter().filter(|c| c.improvement > 0.0).map(|c| c.fp).fold(0.0, f64::max);
                prop_assert_eq!(pool[sel.index].fp, best);
            }
        }
    }
}
