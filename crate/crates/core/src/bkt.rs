//! Bayesian Knowledge Tracing.
//!
//! Two-state model per KC with initial knowledge `p_init`, learning
//! transition `p_learn`, guess `p_guess` and slip `p_slip`. No forgetting.
//! Parameters are fit by exhaustive grid search over the capped box with one
//! finer pass around the best coarse point.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afm::{final_opportunities, KnowledgeEstimate};
use crate::logstore::{Outcome, StudentStepTable};
use crate::math::ln;

/// A first-attempt observation. Hints are incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Observation {
    Correct,
    Incorrect,
}

impl From<Outcome> for Observation {
    fn from(o: Outcome) -> Self {
        if o.is_correct() {
            Observation::Correct
        } else {
            Observation::Incorrect
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktCaps {
    pub guess: f64,
    pub slip: f64,
}

impl Default for BktCaps {
    fn default() -> Self {
        Self { guess: 0.3, slip: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub kc: String,
    pub p_init: f64,
    pub p_learn: f64,
    pub p_guess: f64,
    pub p_slip: f64,
    /// Sequence log-likelihood at these parameters when fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_lik: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BktError {
    #[error("no observations to fit KC {0:?}")]
    EmptyData(String),
    #[error("invalid BKT parameters for KC {kc:?}: {reason}")]
    InvalidParams { kc: String, reason: &'static str },
    #[error("no BKT parameters for KC {0:?}")]
    MissingParams(String),
}

impl BktParams {
    pub fn new(kc: impl Into<String>, p_init: f64, p_learn: f64, p_guess: f64, p_slip: f64) -> Self {
        Self { kc: kc.into(), p_init, p_learn, p_guess, p_slip, log_lik: None }
    }

    pub fn validate(&self, caps: &BktCaps) -> Result<(), BktError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let err = |reason| Err(BktError::InvalidParams { kc: self.kc.clone(), reason });
        if !(unit(self.p_init) && unit(self.p_learn) && unit(self.p_guess) && unit(self.p_slip)) {
            return err("probabilities must lie in [0, 1]");
        }
        if self.p_guess > caps.guess {
            return err("guess above cap");
        }
        if self.p_slip > caps.slip {
            return err("slip above cap");
        }
        Ok(())
    }

    /// Probability of a correct response given current knowledge `p_know`.
    pub fn p_correct(&self, p_know: f64) -> f64 {
        p_know * (1.0 - self.p_slip) + (1.0 - p_know) * self.p_guess
    }

    /// Posterior on the observation followed by the learning transition.
    pub fn update(&self, p_know: f64, obs: Observation) -> f64 {
        let (num, den) = match obs {
            Observation::Correct => {
                let num = p_know * (1.0 - self.p_slip);
                (num, num + (1.0 - p_know) * self.p_guess)
            }
            Observation::Incorrect => {
                let num = p_know * self.p_slip;
                (num, num + (1.0 - p_know) * (1.0 - self.p_slip))
            }
        };
        // A zero-probability observation carries no usable evidence.
        let posterior = if den > 0.0 { num / den } else { p_know };
        (posterior + (1.0 - posterior) * self.p_learn).clamp(0.0, 1.0)
    }

    /// Sum of log predictive probabilities along one sequence.
    pub fn sequence_log_lik(&self, seq: &[Observation]) -> f64 {
        let mut p = self.p_init;
        let mut ll = 0.0;
        for &obs in seq {
            let pc = self.p_correct(p);
            ll += ln(match obs {
                Observation::Correct => pc,
                Observation::Incorrect => 1.0 - pc,
            });
            p = self.update(p, obs);
        }
        ll
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryState {
    pub student: String,
    pub kc: String,
    pub p_know: f64,
    /// Each applied observation with the knowledge estimate after it.
    pub history: Vec<(Observation, f64)>,
}

impl MasteryState {
    pub fn new(student: impl Into<String>, params: &BktParams) -> Self {
        Self { student: student.into(), kc: params.kc.clone(), p_know: params.p_init, history: Vec::new() }
    }
}

pub fn bkt_update(mut state: MasteryState, params: &BktParams, obs: Observation) -> MasteryState {
    state.p_know = params.update(state.p_know, obs);
    state.history.push((obs, state.p_know));
    state
}

/// Folds [`bkt_update`] over `sequence` from `p_init`.
pub fn trace_mastery(params: &BktParams, student: &str, sequence: &[Observation]) -> MasteryState {
    sequence
        .iter()
        .fold(MasteryState::new(student, params), |s, &o| bkt_update(s, params, o))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BktFitConfig {
    pub grid_step: f64,
    pub refine: bool,
    pub refine_step: f64,
    /// Half-width of the refinement window around the coarse optimum.
    pub refine_radius: f64,
    pub caps: BktCaps,
}

impl Default for BktFitConfig {
    fn default() -> Self {
        Self { grid_step: 0.05, refine: true, refine_step: 0.01, refine_radius: 0.05, caps: BktCaps::default() }
    }
}

/// Grid `lo, lo+step, ..., hi` built from integer multiples of the step so
/// that values like 0.3 come out exact; `hi` is always included.
fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let denom = libm::round(1.0 / step);
    let start = libm::ceil(lo * denom - 1e-9) as i64;
    let end = libm::floor(hi * denom + 1e-9) as i64;
    let mut v: Vec<f64> = (start..=end).map(|i| i as f64 / denom).collect();
    if v.first().is_none_or(|&f| f > lo + 1e-12) {
        v.insert(0, lo);
    }
    if v.last().is_none_or(|&l| l < hi - 1e-12) {
        v.push(hi);
    }
    v
}

struct GridSearch<'a> {
    kc: &'a str,
    data: &'a [(Vec<Observation>, usize)],
    best: Option<BktParams>,
    best_ll: f64,
}

impl GridSearch<'_> {
    fn visit(&mut self, axes: [&[f64]; 4]) {
        for &l0 in axes[0] {
            for &t in axes[1] {
                for &g in axes[2] {
                    for &s in axes[3] {
                        let p = BktParams::new(self.kc, l0, t, g, s);
                        let ll: f64 = self.data.iter().map(|(seq, n)| *n as f64 * p.sequence_log_lik(seq)).sum();
                        // strict: the earliest grid point wins ties
                        if self.best.is_none() || ll > self.best_ll {
                            self.best_ll = ll;
                            self.best = Some(p);
                        }
                    }
                }
            }
        }
    }
}

/// Maximum-likelihood BKT parameters for one KC from per-student sequences.
pub fn fit_bkt(kc: &str, sequences: &[Vec<Observation>], config: &BktFitConfig) -> Result<BktParams, BktError> {
    let mut counts: BTreeMap<&[Observation], usize> = BTreeMap::new();
    for s in sequences.iter().filter(|s| !s.is_empty()) {
        *counts.entry(s.as_slice()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(BktError::EmptyData(kc.into()));
    }
    let data: Vec<(Vec<Observation>, usize)> = counts.into_iter().map(|(s, n)| (s.to_vec(), n)).collect();
    let caps = config.caps;
    let mut search = GridSearch { kc, data: &data, best: None, best_ll: f64::NEG_INFINITY };
    let unit = axis(0.0, 1.0, config.grid_step);
    let guess = axis(0.0, caps.guess, config.grid_step);
    let slip = axis(0.0, caps.slip, config.grid_step);
    search.visit([&unit, &unit, &guess, &slip]);

    if config.refine {
        let c = search.best.clone().expect("grid is non-empty");
        let r = config.refine_radius;
        let around = |v: f64, hi: f64| axis((v - r).max(0.0), (v + r).min(hi), config.refine_step);
        let a0 = around(c.p_init, 1.0);
        let a1 = around(c.p_learn, 1.0);
        let a2 = around(c.p_guess, caps.guess);
        let a3 = around(c.p_slip, caps.slip);
        search.visit([&a0, &a1, &a2, &a3]);
    }
    let mut best = search.best.expect("grid is non-empty");
    best.log_lik = Some(search.best_ll);
    Ok(best)
}

/// Each student's first-attempt observations on `kc`, in opportunity order.
pub fn kc_sequences(table: &StudentStepTable, kc: &str) -> Vec<(String, Vec<Observation>)> {
    let mut per: BTreeMap<&str, Vec<(u32, Observation)>> = BTreeMap::new();
    for r in table.records() {
        if let Some(&n) = r.opportunity.get(kc) {
            per.entry(r.student_id.as_str()).or_default().push((n, r.first_attempt_outcome.into()));
        }
    }
    per.into_iter()
        .map(|(s, mut v)| {
            v.sort_by_key(|(n, _)| *n);
            (s.into(), v.into_iter().map(|(_, o)| o).collect())
        })
        .collect()
}

/// Fits every KC in the table.
pub fn fit_bkt_table(table: &StudentStepTable, config: &BktFitConfig) -> Result<BTreeMap<String, BktParams>, BktError> {
    table
        .kcs()
        .iter()
        .map(|kc| {
            let seqs: Vec<Vec<Observation>> = kc_sequences(table, kc).into_iter().map(|(_, s)| s).collect();
            fit_bkt(kc, &seqs, config).map(|p| (kc.clone(), p))
        })
        .collect()
}

/// Traced knowledge after each student's last opportunity per KC.
pub fn bkt_knowledge_estimates(
    params: &BTreeMap<String, BktParams>,
    table: &StudentStepTable,
    mastery_threshold: f64,
) -> Result<Vec<KnowledgeEstimate>, BktError> {
    let mut traced: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for kc in table.kcs() {
        let p = params.get(kc).ok_or_else(|| BktError::MissingParams(kc.clone()))?;
        for (student, seq) in kc_sequences(table, kc) {
            let state = trace_mastery(p, &student, &seq);
            traced.entry(student).or_default().insert(kc.clone(), state.p_know);
        }
    }
    let students = final_opportunities(table);
    Ok(students
        .keys()
        .map(|s| {
            let per = traced.remove(*s).unwrap_or_default();
            KnowledgeEstimate::from_per_kc((*s).into(), per, mastery_threshold)
        })
        .collect())
}
