//! Additive Factors Model.
//!
//! The probability that student `i` answers a step correctly on the first
//! attempt is
//!
//! ```text
//! p = sigmoid(theta_i + sum_{k in kcs} (beta_k + gamma_k * T_k) + delta * treated)
//! ```
//!
//! where `T_k` counts the student's prior opportunities on KC `k`. Student
//! proficiencies carry an L2 penalty (a fixed-effect stand-in for a random
//! intercept), learning rates are kept non-negative, and the fit is a
//! projected Newton ascent with Armijo backtracking from all-zero start.

mod problem;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logstore::{StudentStepRecord, StudentStepTable};
use crate::math::{ln, sigmoid, sqrt};

pub use problem::{AfmData, AfmProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfmConfig {
    /// Ridge weight on student proficiencies.
    pub l2_theta: f64,
    pub max_iter: usize,
    /// Convergence tolerance on the largest projected-gradient component.
    pub tol: f64,
    pub with_condition: bool,
    /// Condition tag coded as treated (1). Defaults to the last tag in sort
    /// order when fitting with a condition effect.
    pub treatment: Option<String>,
    /// Box on |beta|, gamma and |delta|; keeps separable data finite.
    pub max_abs_logit: f64,
}

impl Default for AfmConfig {
    fn default() -> Self {
        Self {
            l2_theta: 0.5,
            max_iter: 500,
            tol: 1e-6,
            with_condition: false,
            treatment: None,
            max_abs_logit: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AfmError {
    #[error("student-step table is empty")]
    EmptyTable,
    #[error("record {0} has no KC")]
    RecordWithoutKc(usize),
    #[error("record {0} has no condition tag")]
    UntaggedRecord(usize),
    #[error("a condition effect needs two conditions, found {0:?}")]
    SingleCondition(Vec<String>),
    #[error("unknown student {0:?}")]
    UnknownStudent(String),
    #[error("unknown KC {0:?}")]
    UnknownKc(String),
    #[error("optimizer did not converge in {} iterations (max gradient {:.3e})", .0.iterations, .0.max_gradient)]
    NonConvergence(Box<AfmFit>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfmFit {
    pub kc_model_name: String,
    pub theta: BTreeMap<String, f64>,
    pub beta: BTreeMap<String, f64>,
    pub gamma: BTreeMap<String, f64>,
    pub delta: Option<f64>,
    pub treatment: Option<String>,
    pub log_lik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_gradient: f64,
    pub l2_theta: f64,
    /// KCs with fewer than two observations; their slope is pinned at 0.
    pub degenerate_kcs: Vec<String>,
    /// KCs whose fitted slope sits on the gamma >= 0 bound.
    pub gamma_at_bound: Vec<String>,
    /// Penalized objective after each accepted step, starting at x = 0.
    /// Non-decreasing up to [`FLAT_RELATIVE`] of its magnitude.
    pub objective_trace: Vec<f64>,
}

/// `2k - 2 LL`
pub fn aic(log_lik: f64, n_params: usize) -> f64 {
    2.0 * n_params as f64 - 2.0 * log_lik
}

/// `k ln(n) - 2 LL`
pub fn bic(log_lik: f64, n_params: usize, n_obs: usize) -> f64 {
    n_params as f64 * ln(n_obs as f64) - 2.0 * log_lik
}

/// Parameter count `|students| + 2 |KCs|`, plus one with a condition effect.
pub fn parameter_count(n_students: usize, n_kcs: usize, with_condition: bool) -> usize {
    n_students + 2 * n_kcs + usize::from(with_condition)
}

impl AfmFit {
    /// Success probability for `student` on a step with the given KCs.
    /// `prior` maps each KC to its 0-based prior opportunity count.
    /// With `fallback_zero_theta` an unseen student gets proficiency 0.
    pub fn predict(
        &self,
        student: &str,
        prior: &BTreeMap<String, u32>,
        treated: bool,
        fallback_zero_theta: bool,
    ) -> Result<f64, AfmError> {
        let theta = match self.theta.get(student) {
            Some(&t) => t,
            None if fallback_zero_theta => 0.0,
            None => return Err(AfmError::UnknownStudent(student.into())),
        };
        let mut eta = theta;
        for (kc, &t) in prior {
            let b = self.beta.get(kc).ok_or_else(|| AfmError::UnknownKc(kc.clone()))?;
            let g = self.gamma[kc];
            eta += b + g * f64::from(t);
        }
        if treated {
            eta += self.delta.unwrap_or(0.0);
        }
        Ok(sigmoid(eta))
    }

    /// Prediction for a roll-up record at its own opportunity counts.
    pub fn predict_record(&self, record: &StudentStepRecord) -> Result<f64, AfmError> {
        let prior = record
            .opportunity
            .iter()
            .map(|(k, &n)| (k.clone(), n.saturating_sub(1)))
            .collect();
        let treated = match (&self.treatment, &record.condition_tag) {
            (Some(t), Some(c)) => t == c,
            _ => false,
        };
        self.predict(&record.student_id, &prior, treated, false)
    }
}

/// Free-function form of [`AfmFit::predict`].
pub fn afm_predict(
    fit: &AfmFit,
    student: &str,
    prior: &BTreeMap<String, u32>,
    treated: bool,
    fallback_zero_theta: bool,
) -> Result<f64, AfmError> {
    fit.predict(student, prior, treated, fallback_zero_theta)
}

fn resolve_treatment(table: &StudentStepTable, config: &AfmConfig) -> Result<Option<String>, AfmError> {
    if !config.with_condition {
        return Ok(None);
    }
    let conditions = table.conditions();
    if conditions.len() < 2 {
        return Err(AfmError::SingleCondition(conditions.into_iter().collect()));
    }
    let treatment = match &config.treatment {
        Some(t) if conditions.contains(t) => t.clone(),
        Some(_) => return Err(AfmError::SingleCondition(conditions.into_iter().collect())),
        None => conditions.iter().next_back().cloned().unwrap_or_default(),
    };
    Ok(Some(treatment))
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
    pinned: Vec<bool>,
}

impl Bounds {
    fn new(data: &AfmData, max_abs: f64) -> Self {
        let n = data.dim();
        let mut lower = alloc::vec![f64::NEG_INFINITY; n];
        let mut upper = alloc::vec![f64::INFINITY; n];
        let mut pinned = alloc::vec![false; n];
        for k in 0..data.n_kcs() {
            lower[data.beta_index(k)] = -max_abs;
            upper[data.beta_index(k)] = max_abs;
            lower[data.gamma_index(k)] = 0.0;
            upper[data.gamma_index(k)] = max_abs;
            if data.kc_counts[k] < 2 {
                pinned[data.gamma_index(k)] = true;
            }
        }
        if let Some(d) = data.delta_index() {
            lower[d] = -max_abs;
            upper[d] = max_abs;
        }
        Self { lower, upper, pinned }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = if self.pinned[i] { 0.0 } else { v.clamp(self.lower[i], self.upper[i]) };
        }
    }

    /// Coordinates held fixed this iteration: pinned, or on a bound with the
    /// gradient pointing outward.
    fn fixed(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| {
                self.pinned[i]
                    || (x[i] <= self.lower[i] && g[i] <= 0.0)
                    || (x[i] >= self.upper[i] && g[i] >= 0.0)
            })
            .collect()
    }
}

struct Optimum {
    x: Vec<f64>,
    converged: bool,
    iterations: usize,
    max_gradient: f64,
    trace: Vec<f64>,
}

fn projected_max(g: &[f64], fixed: &[bool]) -> f64 {
    g.iter()
        .zip(fixed)
        .filter(|(_, &f)| !f)
        .fold(0.0_f64, |m, (v, _)| m.max(v.abs()))
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
/// Relative resolution of the objective used by [`flat_step`].
pub const FLAT_RELATIVE: f64 = 1e-12;

fn line_search(
    problem: &AfmProblem,
    bounds: &Bounds,
    x: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
) -> Option<(Vec<f64>, f64)> {
    if let Some(step) = flat_step(problem, bounds, x, f, g, dir) {
        return Some(step);
    }
    let mut alpha = 1.0;
    let mut cand = alloc::vec![0.0; x.len()];
    for _ in 0..MAX_HALVINGS {
        for i in 0..x.len() {
            cand[i] = x[i] + alpha * dir[i];
        }
        bounds.project(&mut cand);
        let gain: f64 = (0..x.len()).map(|i| g[i] * (cand[i] - x[i])).sum();
        if gain > 0.0 {
            let fc = problem.objective(&cand);
            if fc.is_finite() && fc >= f + ARMIJO * gain {
                return Some((cand, fc));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Near the optimum the predicted gain of the full step can fall below the
/// resolution of the objective, so Armijo cannot tell a good step from
/// rounding. There the full step is taken if it shrinks the projected
/// gradient and leaves the objective unchanged to within that resolution.
fn flat_step(
    problem: &AfmProblem,
    bounds: &Bounds,
    x: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let resolution = FLAT_RELATIVE * f.abs().max(1.0);
    let mut cand: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + d).collect();
    bounds.project(&mut cand);
    let gain: f64 = (0..x.len()).map(|i| g[i] * (cand[i] - x[i])).sum();
    if !(gain > 0.0 && gain <= resolution) {
        return None;
    }
    let fc = problem.objective(&cand);
    if !fc.is_finite() || fc < f - resolution {
        return None;
    }
    let gc = problem.gradient(&cand);
    let before = projected_max(g, &bounds.fixed(x, g));
    let after = projected_max(&gc, &bounds.fixed(&cand, &gc));
    (after < before).then_some((cand, fc))
}

fn optimize(problem: &AfmProblem, bounds: &Bounds, config: &AfmConfig) -> Optimum {
    let s = problem.data.n_students();
    let n = problem.dim();
    let mut x = alloc::vec![0.0; n];
    bounds.project(&mut x);
    let mut f = problem.objective(&x);
    let mut trace = alloc::vec![f];
    let mut iterations = 0;
    loop {
        let g = problem.gradient(&x);
        let fixed = bounds.fixed(&x, &g);
        let max_gradient = projected_max(&g, &fixed);
        if max_gradient <= config.tol || iterations >= config.max_iter {
            return Optimum { converged: max_gradient <= config.tol, x, iterations, max_gradient, trace };
        }
        let mut rhs = g.clone();
        for i in 0..n {
            if fixed[i] {
                rhs[i] = 0.0;
            }
        }
        let free_rest: Vec<bool> = fixed[s..].iter().map(|f| !f).collect();
        let curv = problem.curvature(&x);

        let mut step = None;
        let mut damping = 0.0;
        while damping <= 1e6 {
            if let Some(dir) = problem.newton_direction(&curv, &rhs, &free_rest, damping) {
                step = line_search(problem, bounds, &x, f, &g, &dir);
                if step.is_some() {
                    break;
                }
            }
            damping = if damping == 0.0 { 1e-8 } else { damping * 100.0 };
        }
        if step.is_none() {
            step = line_search(problem, bounds, &x, f, &g, &rhs);
        }
        match step {
            Some((xn, fnew)) => {
                x = xn;
                f = fnew;
                trace.push(f);
                iterations += 1;
            }
            None => {
                return Optimum { converged: false, x, iterations, max_gradient, trace };
            }
        }
    }
}

fn build_fit(
    table: &StudentStepTable,
    problem: &AfmProblem,
    bounds: &Bounds,
    opt: Optimum,
    config: &AfmConfig,
    treatment: Option<String>,
) -> AfmFit {
    let data = &problem.data;
    let x = &opt.x;
    let theta = data.students.iter().cloned().zip(x.iter().copied()).collect();
    let mut beta = BTreeMap::new();
    let mut gamma = BTreeMap::new();
    let mut degenerate_kcs = Vec::new();
    let mut gamma_at_bound = Vec::new();
    for (k, kc) in data.kcs.iter().enumerate() {
        beta.insert(kc.clone(), x[data.beta_index(k)]);
        let gi = data.gamma_index(k);
        gamma.insert(kc.clone(), x[gi]);
        if bounds.pinned[gi] {
            degenerate_kcs.push(kc.clone());
        }
        if x[gi] <= 0.0 {
            gamma_at_bound.push(kc.clone());
        }
    }
    let log_lik = problem.log_lik(x);
    let n_params = parameter_count(data.n_students(), data.n_kcs(), data.with_condition);
    let n_obs = data.n_obs();
    AfmFit {
        kc_model_name: table.kc_model_name().into(),
        theta,
        beta,
        gamma,
        delta: data.delta_index().map(|d| x[d]),
        treatment,
        log_lik,
        n_params,
        n_obs,
        aic: aic(log_lik, n_params),
        bic: bic(log_lik, n_params, n_obs),
        converged: opt.converged,
        iterations: opt.iterations,
        max_gradient: opt.max_gradient,
        l2_theta: config.l2_theta,
        degenerate_kcs,
        gamma_at_bound,
        objective_trace: opt.trace,
    }
}

/// Fits AFM by penalized maximum likelihood.
///
/// KCs with fewer than two observations are kept with their slope pinned at
/// zero and listed in [`AfmFit::degenerate_kcs`]. Running out of iterations
/// returns [`AfmError::NonConvergence`] with the best fit reached.
pub fn fit_afm(table: &StudentStepTable, config: &AfmConfig) -> Result<AfmFit, AfmError> {
    fit_with_problem(table, config).map(|(fit, _, _)| fit)
}

fn fit_with_problem(
    table: &StudentStepTable,
    config: &AfmConfig,
) -> Result<(AfmFit, AfmProblem, Vec<f64>), AfmError> {
    let treatment = resolve_treatment(table, config)?;
    let data = AfmData::from_table(table, treatment.as_deref())?;
    let problem = AfmProblem::new(data, config.l2_theta);
    let bounds = Bounds::new(&problem.data, config.max_abs_logit);
    let opt = optimize(&problem, &bounds, config);
    let x = opt.x.clone();
    let fit = build_fit(table, &problem, &bounds, opt, config, treatment);
    if fit.converged {
        Ok((fit, problem, x))
    } else {
        Err(AfmError::NonConvergence(Box::new(fit)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEffect {
    pub treatment: String,
    pub delta: f64,
    /// Wald-style, from the inverse observed information; approximate.
    pub std_error_approx: f64,
    pub fit: AfmFit,
}

/// Fits AFM jointly with a condition effect. A negative `delta` means lower
/// success probability in the treated condition.
pub fn afm_condition_effect(table: &StudentStepTable, config: &AfmConfig) -> Result<ConditionEffect, AfmError> {
    let config = AfmConfig { with_condition: true, ..config.clone() };
    let (fit, problem, x) = fit_with_problem(table, &config)?;
    let data = &problem.data;
    let s = data.n_students();
    let d_index = data.delta_index().expect("condition fit has a delta");
    let bounds = Bounds::new(data, config.max_abs_logit);
    let g = problem.gradient(&x);
    let fixed = bounds.fixed(&x, &g);
    let free_rest: Vec<bool> = fixed[s..].iter().map(|f| !f).collect();
    let curv = problem.curvature(&x);
    let mut unit = alloc::vec![0.0; problem.dim()];
    unit[d_index] = 1.0;
    let std_error_approx = if fixed[d_index] {
        f64::NAN
    } else {
        problem
            .newton_direction(&curv, &unit, &free_rest, 0.0)
            .or_else(|| problem.newton_direction(&curv, &unit, &free_rest, 1e-8))
            .map(|col| sqrt(col[d_index]))
            .unwrap_or(f64::NAN)
    };
    Ok(ConditionEffect {
        treatment: fit.treatment.clone().unwrap_or_default(),
        delta: fit.delta.unwrap_or(0.0),
        std_error_approx,
        fit,
    })
}

/// End-of-practice knowledge for one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEstimate {
    pub student: String,
    /// Predicted success at the opportunity after the last observed one.
    pub per_kc_final: BTreeMap<String, f64>,
    pub total: f64,
    pub average: f64,
    pub mastered_count: usize,
}

impl KnowledgeEstimate {
    pub fn from_per_kc(student: String, per_kc_final: BTreeMap<String, f64>, threshold: f64) -> Self {
        let total: f64 = per_kc_final.values().sum();
        let average = if per_kc_final.is_empty() { 0.0 } else { total / per_kc_final.len() as f64 };
        let mastered_count = per_kc_final.values().filter(|&&p| p >= threshold).count();
        Self { student, per_kc_final, total, average, mastered_count }
    }
}

/// Last observed opportunity per (student, KC).
pub(crate) fn final_opportunities(table: &StudentStepTable) -> BTreeMap<&str, BTreeMap<&str, u32>> {
    let mut out: BTreeMap<&str, BTreeMap<&str, u32>> = BTreeMap::new();
    for r in table.records() {
        let per = out.entry(r.student_id.as_str()).or_default();
        for (kc, &n) in &r.opportunity {
            let e = per.entry(kc.as_str()).or_insert(0);
            *e = (*e).max(n);
        }
    }
    out
}

/// Per-student knowledge at the opportunity following each KC's last
/// practiced one, with the condition effect left out.
pub fn knowledge_estimates(
    fit: &AfmFit,
    table: &StudentStepTable,
    mastery_threshold: f64,
) -> Result<Vec<KnowledgeEstimate>, AfmError> {
    let mut out = Vec::new();
    for (student, per) in final_opportunities(table) {
        let mut per_kc_final = BTreeMap::new();
        for (kc, n) in per {
            let prior: BTreeMap<String, u32> = [(String::from(kc), n)].into_iter().collect();
            per_kc_final.insert(String::from(kc), fit.predict(student, &prior, false, false)?);
        }
        out.push(KnowledgeEstimate::from_per_kc(student.into(), per_kc_final, mastery_threshold));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
