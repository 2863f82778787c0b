//! Learning curves per KC and a simple screen for high, flat curves.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afm::{AfmError, AfmFit};
use crate::logstore::StudentStepTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub opportunity: u32,
    pub n_students: usize,
    /// Fraction of first attempts that were errors or hints.
    pub error_rate: f64,
    /// `1 - mean AFM prediction` over the same observations.
    pub predicted_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("unknown KC {0:?}")]
    UnknownKc(String),
    #[error(transparent)]
    Prediction(#[from] AfmError),
}

pub const DEFAULT_MIN_N: usize = 10;

/// Error rate at every opportunity of `kc` with at least `min_n` students.
pub fn learning_curve(
    table: &StudentStepTable,
    kc: &str,
    fit: Option<&AfmFit>,
    min_n: usize,
) -> Result<Vec<CurvePoint>, CurveError> {
    if !table.kcs().contains(kc) {
        return Err(CurveError::UnknownKc(kc.into()));
    }
    // opportunity -> (n, errors, sum of predictions)
    let mut acc: BTreeMap<u32, (usize, usize, f64)> = BTreeMap::new();
    for r in table.records() {
        let Some(&n) = r.opportunity.get(kc) else { continue };
        let e = acc.entry(n).or_default();
        e.0 += 1;
        if !r.is_correct() {
            e.1 += 1;
        }
        if let Some(f) = fit {
            e.2 += f.predict_record(r)?;
        }
    }
    Ok(acc
        .into_iter()
        .filter(|(_, (n, _, _))| *n >= min_n.max(1))
        .map(|(opportunity, (n, errors, psum))| CurvePoint {
            opportunity,
            n_students: n,
            error_rate: errors as f64 / n as f64,
            predicted_error: fit.map(|_| 1.0 - psum / n as f64),
        })
        .collect())
}

/// Curves for every KC in the table.
pub fn all_curves(
    table: &StudentStepTable,
    fit: Option<&AfmFit>,
    min_n: usize,
) -> Result<BTreeMap<String, Vec<CurvePoint>>, CurveError> {
    table
        .kcs()
        .iter()
        .map(|kc| learning_curve(table, kc, fit, min_n).map(|c| (kc.clone(), c)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KcFlag {
    HighFlat,
    NoData,
    Ok,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagConfig {
    pub high_error: f64,
    pub flat_slope: f64,
}

impl Default for FlagConfig {
    fn default() -> Self {
        Self { high_error: 0.4, flat_slope: 0.01 }
    }
}

/// `HIGH_FLAT` when the mean point error exceeds `high_error` and the slope
/// is under `flat_slope`; `NO_DATA` for empty curves. KCs missing from
/// `gammas` are treated as having slope 0.
pub fn flag_kcs(
    curves: &BTreeMap<String, Vec<CurvePoint>>,
    gammas: &BTreeMap<String, f64>,
    config: &FlagConfig,
) -> Vec<(String, KcFlag)> {
    curves
        .iter()
        .map(|(kc, points)| {
            let flag = if points.is_empty() {
                KcFlag::NoData
            } else {
                let mean = points.iter().map(|p| p.error_rate).sum::<f64>() / points.len() as f64;
                let gamma = gammas.get(kc).copied().unwrap_or(0.0);
                if mean > config.high_error && gamma < config.flat_slope {
                    KcFlag::HighFlat
                } else {
                    KcFlag::Ok
                }
            };
            (kc.clone(), flag)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcmodel::KcModel;
    use crate::logstore::{rollup_student_steps, Outcome, Transaction};
    use alloc::format;
    use alloc::vec;

    fn three_students() -> StudentStepTable {
        let mut txs = Vec::new();
        for s in 0..3 {
            for (i, outcome) in [Outcome::Incorrect, Outcome::Correct].into_iter().enumerate() {
                txs.push(Transaction {
                    student_id: format!("s{s}"),
                    session_id: "x".into(),
                    timestamp: 10.0 * i as f64,
                    problem_id: "p".into(),
                    step_id: format!("st{i}"),
                    attempt_index: 1,
                    outcome,
                    condition_tag: None,
                    unit_tag: None,
                });
            }
        }
        let model = KcModel::from_rows("m", [("p", "st0", "k"), ("p", "st1", "k")]).unwrap();
        rollup_student_steps(&txs, &model).unwrap().0
    }

    #[test]
    fn two_point_curve() {
        let c = learning_curve(&three_students(), "k", None, 1).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].opportunity, c[0].error_rate, c[0].n_students), (1, 1.0, 3));
        assert_eq!((c[1].opportunity, c[1].error_rate), (2, 0.0));
        assert!(c[0].predicted_error.is_none());
    }

    #[test]
    fn min_n_filters_everything() {
        assert!(learning_curve(&three_students(), "k", None, 5).unwrap().is_empty());
    }

    #[test]
    fn unknown_kc() {
        assert_eq!(
            learning_curve(&three_students(), "nope", None, 1).unwrap_err(),
            CurveError::UnknownKc("nope".into())
        );
    }

    fn points(errors: &[f64]) -> Vec<CurvePoint> {
        errors
            .iter()
            .enumerate()
            .map(|(i, &e)| CurvePoint { opportunity: i as u32 + 1, n_students: 20, error_rate: e, predicted_error: None })
            .collect()
    }

    #[test]
    fn flag_rules() {
        let curves: BTreeMap<String, Vec<CurvePoint>> = [
            ("flat".into(), points(&[0.6, 0.58, 0.61])),
            ("learned".into(), points(&[0.5, 0.3, 0.1])),
            ("sparse".into(), vec![]),
        ]
        .into_iter()
        .collect();
        let gammas: BTreeMap<String, f64> =
            [("flat".into(), 0.002), ("learned".into(), 0.4), ("sparse".into(), 0.0)].into_iter().collect();
        let flags: BTreeMap<_, _> = flag_kcs(&curves, &gammas, &FlagConfig::default()).into_iter().collect();
        assert_eq!(flags["flat"], KcFlag::HighFlat);
        assert_eq!(flags["learned"], KcFlag::Ok);
        assert_eq!(flags["sparse"], KcFlag::NoData);
    }

    #[test]
    fn two_students_below_min_n_is_no_data() {
        let table = three_students();
        let curves = all_curves(&table, None, 10).unwrap();
        let flags = flag_kcs(&curves, &BTreeMap::new(), &FlagConfig::default());
        assert_eq!(flags, vec![("k".into(), KcFlag::NoData)]);
    }
}
