//! Offline simulation of tutor practice policies.
//!
//! The tutor tracks each KC with BKT and uses that belief to pick problems
//! and to auto-complete steps whose KCs are all mastered. The simulated
//! student answers from its own ground truth (BKT or AFM), which need not
//! agree with the tracker. Problems are selected at problem boundaries and
//! each problem is used at most once.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::{BktParams, Observation};
use crate::math::sigmoid;
use crate::stats::{summarize, Summary};
use crate::synth::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStep {
    pub step_id: String,
    pub kcs: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub steps: Vec<PoolStep>,
    pub est_step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("problem pool is empty")]
    EmptyPool,
    #[error("problem {0:?} has no steps")]
    EmptyProblem(String),
    #[error("problem {0:?} appears twice in the pool")]
    DuplicateProblem(String),
    #[error("step {step:?} of problem {problem:?} has no KC")]
    StepWithoutKc { problem: String, step: String },
    #[error("problem {0:?} needs a positive step duration")]
    BadDuration(String),
    #[error("no mastery estimate for KC {0:?}")]
    MissingMastery(String),
    #[error("no tracker parameters for KC {0:?}")]
    MissingTrackerParams(String),
    #[error("no ground truth for KC {0:?}")]
    MissingTruth(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemPool {
    problems: Vec<Problem>,
}

impl ProblemPool {
    pub fn new(problems: Vec<Problem>) -> Result<Self, SimError> {
        if problems.is_empty() {
            return Err(SimError::EmptyPool);
        }
        let mut seen = BTreeSet::new();
        for p in &problems {
            if !seen.insert(p.problem_id.as_str()) {
                return Err(SimError::DuplicateProblem(p.problem_id.clone()));
            }
            if p.steps.is_empty() {
                return Err(SimError::EmptyProblem(p.problem_id.clone()));
            }
            if p.est_step_seconds.is_nan() || p.est_step_seconds <= 0.0 {
                return Err(SimError::BadDuration(p.problem_id.clone()));
            }
            if let Some(s) = p.steps.iter().find(|s| s.kcs.is_empty()) {
                return Err(SimError::StepWithoutKc { problem: p.problem_id.clone(), step: s.step_id.clone() });
            }
        }
        Ok(Self { problems })
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn kcs(&self) -> BTreeSet<String> {
        self.problems.iter().flat_map(|p| p.steps.iter().flat_map(|s| s.kcs.iter().cloned())).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.problems.iter().map(|p| p.steps.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Selection {
    FixedSequence,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub mastery_threshold: f64,
    pub overpractice_threshold: f64,
    pub skip_enabled: bool,
    pub selection: Selection,
    pub max_problems: usize,
    pub rng_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mastery_threshold: crate::DEFAULT_MASTERY_THRESHOLD,
            overpractice_threshold: crate::DEFAULT_OVERPRACTICE_THRESHOLD,
            skip_enabled: true,
            selection: Selection::Adaptive,
            max_problems: usize::MAX,
            rng_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.overpractice_threshold.is_nan() || self.overpractice_threshold <= 0.0 {
            return Err(SimError::InvalidConfig("overpractice threshold must be positive"));
        }
        if self.overpractice_threshold > self.mastery_threshold {
            return Err(SimError::InvalidConfig("overpractice threshold above mastery threshold"));
        }
        if self.mastery_threshold > 1.0 {
            return Err(SimError::InvalidConfig("mastery threshold above 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Choice {
    Problem(String),
    Done,
}

fn mastery_of(mastery: &BTreeMap<String, f64>, kc: &str) -> Result<f64, SimError> {
    mastery.get(kc).copied().ok_or_else(|| SimError::MissingMastery(kc.into()))
}

/// Next problem under `config.selection`.
///
/// Adaptive utility is the number of steps practicing at least one
/// unmastered KC; ties go to fewer fully-mastered steps, then the smaller
/// problem id. Zero best utility means `Done`.
pub fn select_next_problem(
    pool: &ProblemPool,
    mastery: &BTreeMap<String, f64>,
    completed: &BTreeSet<String>,
    config: &PolicyConfig,
) -> Result<Choice, SimError> {
    if pool.problems.is_empty() {
        return Err(SimError::EmptyPool);
    }
    let open = pool.problems.iter().filter(|p| !completed.contains(&p.problem_id));
    match config.selection {
        Selection::FixedSequence => Ok(open.map(|p| Choice::Problem(p.problem_id.clone())).next().unwrap_or(Choice::Done)),
        Selection::Adaptive => {
            let mut best: Option<(usize, usize, &str)> = None;
            for p in open {
                let mut unmastered = 0;
                let mut mastered = 0;
                for s in &p.steps {
                    let mut any = false;
                    for kc in &s.kcs {
                        any |= mastery_of(mastery, kc)? < config.mastery_threshold;
                    }
                    if any {
                        unmastered += 1;
                    } else {
                        mastered += 1;
                    }
                }
                let better = match best {
                    None => true,
                    Some((u, m, id)) => {
                        unmastered > u || (unmastered == u && (mastered < m || (mastered == m && p.problem_id.as_str() < id)))
                    }
                };
                if better {
                    best = Some((unmastered, mastered, &p.problem_id));
                }
            }
            Ok(match best {
                Some((u, _, id)) if u > 0 => Choice::Problem(id.into()),
                _ => Choice::Done,
            })
        }
    }
}

/// True iff skipping is on and every KC on the step is at or above the
/// mastery threshold.
pub fn should_skip_step(kcs: &BTreeSet<String>, mastery: &BTreeMap<String, f64>, config: &PolicyConfig) -> Result<bool, SimError> {
    if !config.skip_enabled {
        return Ok(false);
    }
    for kc in kcs {
        if mastery_of(mastery, kc)? < config.mastery_threshold {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroundTruth {
    /// Hidden knowledge state per KC, drawn from `p_init` at the start.
    BktTruth { params: BTreeMap<String, BktParams> },
    /// Success probability from AFM at the student's own practice counts.
    AfmTruth { theta: f64, beta: BTreeMap<String, f64>, gamma: BTreeMap<String, f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudent {
    pub id: String,
    pub truth: GroundTruth,
    /// Rng stream; the simulation rng is derived from `(rng_seed, stream)`.
    pub stream: u64,
}

impl SyntheticStudent {
    fn check_covers(&self, kcs: &BTreeSet<String>) -> Result<(), SimError> {
        for kc in kcs {
            let ok = match &self.truth {
                GroundTruth::BktTruth { params } => params.contains_key(kc),
                GroundTruth::AfmTruth { beta, gamma, .. } => beta.contains_key(kc) && gamma.contains_key(kc),
            };
            if !ok {
                return Err(SimError::MissingTruth(kc.clone()));
            }
        }
        Ok(())
    }
}

/// A population of BKT-truth students sharing parameters.
pub fn bkt_population(params: &BTreeMap<String, BktParams>, n: usize) -> Vec<SyntheticStudent> {
    (0..n)
        .map(|i| SyntheticStudent {
            id: crate::synth::student_id(i),
            truth: GroundTruth::BktTruth { params: params.clone() },
            stream: i as u64,
        })
        .collect()
}

enum TruthState<'a> {
    Bkt { params: &'a BTreeMap<String, BktParams>, known: BTreeMap<&'a str, bool> },
    Afm { theta: f64, beta: &'a BTreeMap<String, f64>, gamma: &'a BTreeMap<String, f64>, practiced: BTreeMap<String, u32> },
}

impl<'a> TruthState<'a> {
    fn new(student: &'a SyntheticStudent, kcs: &'a BTreeSet<String>, rng: &mut ChaCha8Rng) -> Self {
        match &student.truth {
            GroundTruth::BktTruth { params } => {
                let known = kcs.iter().map(|kc| (kc.as_str(), rng.random_bool(params[kc].p_init))).collect();
                TruthState::Bkt { params, known }
            }
            GroundTruth::AfmTruth { theta, beta, gamma } => {
                TruthState::Afm { theta: *theta, beta, gamma, practiced: BTreeMap::new() }
            }
        }
    }

    /// Samples a first-attempt response on a step and applies learning.
    fn respond(&mut self, kcs: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> bool {
        match self {
            TruthState::Bkt { params, known } => {
                let mut correct = true;
                for kc in kcs {
                    let p = &params[kc];
                    let k = known[kc.as_str()];
                    let pc = if k { 1.0 - p.p_slip } else { p.p_guess };
                    correct &= rng.random_bool(pc);
                }
                for kc in kcs {
                    let p = &params[kc];
                    let k = known.get_mut(kc.as_str()).expect("initialized for pool KCs");
                    if !*k && rng.random_bool(p.p_learn) {
                        *k = true;
                    }
                }
                correct
            }
            TruthState::Afm { theta, beta, gamma, practiced } => {
                let mut eta = *theta;
                for kc in kcs {
                    let t = practiced.get(kc).copied().unwrap_or(0);
                    eta += beta[kc] + gamma[kc] * f64::from(t);
                }
                let correct = rng.random_bool(sigmoid(eta));
                for kc in kcs {
                    *practiced.entry(kc.clone()).or_insert(0) += 1;
                }
                correct
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcSimReport {
    pub opportunities: u32,
    pub opportunities_after_overpractice_threshold: u32,
    pub final_mastery_estimate: f64,
    pub underpracticed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub student: String,
    pub per_kc: BTreeMap<String, KcSimReport>,
    pub skipped_steps: u32,
    pub completed_steps: u32,
    pub simulated_seconds: f64,
    pub problems: Vec<String>,
}

impl SimReport {
    pub fn total_opportunities(&self) -> u32 {
        self.per_kc.values().map(|k| k.opportunities).sum()
    }

    pub fn total_overpractice(&self) -> u32 {
        self.per_kc.values().map(|k| k.opportunities_after_overpractice_threshold).sum()
    }

    pub fn mastered_kcs(&self) -> usize {
        self.per_kc.values().filter(|k| !k.underpracticed).count()
    }
}

/// One step as the simulator saw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub problem_id: String,
    pub step_id: String,
    /// Tracker mastery of the step's KCs before the step.
    pub pre_mastery: BTreeMap<String, f64>,
    pub skipped: bool,
    pub correct: Option<bool>,
}

pub fn simulate_practice(
    pool: &ProblemPool,
    student: &SyntheticStudent,
    tracker: &BTreeMap<String, BktParams>,
    config: &PolicyConfig,
) -> Result<SimReport, SimError> {
    run(pool, student, tracker, config, None)
}

/// [`simulate_practice`] that also returns every step event.
pub fn simulate_practice_traced(
    pool: &ProblemPool,
    student: &SyntheticStudent,
    tracker: &BTreeMap<String, BktParams>,
    config: &PolicyConfig,
) -> Result<(SimReport, Vec<StepEvent>), SimError> {
    let mut events = Vec::new();
    let report = run(pool, student, tracker, config, Some(&mut events))?;
    Ok((report, events))
}

fn run(
    pool: &ProblemPool,
    student: &SyntheticStudent,
    tracker: &BTreeMap<String, BktParams>,
    config: &PolicyConfig,
    mut events: Option<&mut Vec<StepEvent>>,
) -> Result<SimReport, SimError> {
    config.validate()?;
    let kcs = pool.kcs();
    for kc in &kcs {
        if !tracker.contains_key(kc) {
            return Err(SimError::MissingTrackerParams(kc.clone()));
        }
    }
    student.check_covers(&kcs)?;

    let mut rng = rng_for(config.rng_seed, student.stream);
    let mut truth = TruthState::new(student, &kcs, &mut rng);
    let mut mastery: BTreeMap<String, f64> = kcs.iter().map(|kc| (kc.clone(), tracker[kc].p_init)).collect();
    let mut counts: BTreeMap<&str, (u32, u32)> = kcs.iter().map(|k| (k.as_str(), (0, 0))).collect();
    let mut completed_set = BTreeSet::new();
    let mut problems = Vec::new();
    let (mut skipped_steps, mut completed_steps, mut seconds) = (0u32, 0u32, 0.0f64);

    while problems.len() < config.max_problems {
        let id = match select_next_problem(pool, &mastery, &completed_set, config)? {
            Choice::Done => break,
            Choice::Problem(id) => id,
        };
        let problem = pool.problems.iter().find(|p| p.problem_id == id).expect("selected from pool");
        completed_set.insert(id.clone());
        problems.push(id);
        for step in &problem.steps {
            let pre: BTreeMap<String, f64> = step.kcs.iter().map(|k| (k.clone(), mastery[k])).collect();
            let skip = should_skip_step(&step.kcs, &mastery, config)?;
            assert!(
                !skip || pre.values().all(|&m| m >= config.mastery_threshold),
                "skipped a step with an unmastered KC"
            );
            let mut correct = None;
            if skip {
                skipped_steps += 1;
            } else {
                let ok = truth.respond(&step.kcs, &mut rng);
                let obs = if ok { Observation::Correct } else { Observation::Incorrect };
                for kc in &step.kcs {
                    let c = counts.get_mut(kc.as_str()).expect("pool KC");
                    c.0 += 1;
                    if pre[kc] >= config.overpractice_threshold {
                        c.1 += 1;
                    }
                    let m = mastery.get_mut(kc).expect("pool KC");
                    *m = tracker[kc].update(*m, obs);
                }
                completed_steps += 1;
                seconds += problem.est_step_seconds;
                correct = Some(ok);
            }
            if let Some(ev) = events.as_deref_mut() {
                ev.push(StepEvent {
                    problem_id: problem.problem_id.clone(),
                    step_id: step.step_id.clone(),
                    pre_mastery: pre,
                    skipped: skip,
                    correct,
                });
            }
        }
    }

    let per_kc = counts
        .into_iter()
        .map(|(kc, (opportunities, after))| {
            let m = mastery[kc];
            (
                String::from(kc),
                KcSimReport {
                    opportunities,
                    opportunities_after_overpractice_threshold: after,
                    final_mastery_estimate: m,
                    underpracticed: m < config.mastery_threshold,
                },
            )
        })
        .collect();
    Ok(SimReport {
        student: student.id.clone(),
        per_kc,
        skipped_steps,
        completed_steps,
        simulated_seconds: seconds,
        problems,
    })
}

/// Simulates every student under one config.
pub fn run_population(
    pool: &ProblemPool,
    population: &[SyntheticStudent],
    tracker: &BTreeMap<String, BktParams>,
    config: &PolicyConfig,
) -> Result<Vec<SimReport>, SimError> {
    population.iter().map(|s| simulate_practice(pool, s, tracker, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcAggregate {
    pub opportunities: Summary,
    pub opportunities_after_overpractice_threshold: Summary,
    pub final_mastery_estimate: Summary,
    pub underpracticed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub config: PolicyConfig,
    pub skipped_steps: Summary,
    pub completed_steps: Summary,
    pub simulated_seconds: Summary,
    pub opportunities: Summary,
    pub opportunities_after_overpractice_threshold: Summary,
    pub mastered_kcs: Summary,
    pub per_kc: BTreeMap<String, KcAggregate>,
}

/// Per-student differences (this config minus the first config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub config_index: usize,
    pub skipped_steps: Summary,
    pub completed_steps: Summary,
    pub simulated_seconds: Summary,
    pub opportunities: Summary,
    pub opportunities_after_overpractice_threshold: Summary,
    pub mastered_kcs: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub students: usize,
    pub aggregates: Vec<PolicyAggregate>,
    pub paired_vs_first: Vec<PairedDifference>,
}

type Metric = fn(&SimReport) -> f64;

const METRICS: [Metric; 6] = [
    |r| f64::from(r.skipped_steps),
    |r| f64::from(r.completed_steps),
    |r| r.simulated_seconds,
    |r| f64::from(r.total_opportunities()),
    |r| f64::from(r.total_overpractice()),
    |r| r.mastered_kcs() as f64,
];

fn metric_summaries(reports: &[SimReport]) -> [Summary; 6] {
    METRICS.map(|m| summarize(&reports.iter().map(m).collect::<Vec<_>>()))
}

/// Aggregates a population simulation under one config.
pub fn aggregate_reports(config: &PolicyConfig, reports: &[SimReport]) -> PolicyAggregate {
    let [skipped_steps, completed_steps, simulated_seconds, opportunities, overpractice, mastered_kcs] =
        metric_summaries(reports);
    let kcs: BTreeSet<&String> = reports.iter().flat_map(|r| r.per_kc.keys()).collect();
    let per_kc = kcs
        .into_iter()
        .map(|kc| {
            let rows: Vec<&KcSimReport> = reports.iter().filter_map(|r| r.per_kc.get(kc)).collect();
            let col = |f: fn(&KcSimReport) -> f64| summarize(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let under = rows.iter().filter(|r| r.underpracticed).count() as f64 / rows.len().max(1) as f64;
            (
                kc.clone(),
                KcAggregate {
                    opportunities: col(|r| f64::from(r.opportunities)),
                    opportunities_after_overpractice_threshold: col(|r| {
                        f64::from(r.opportunities_after_overpractice_threshold)
                    }),
                    final_mastery_estimate: col(|r| r.final_mastery_estimate),
                    underpracticed_fraction: under,
                },
            )
        })
        .collect();
    PolicyAggregate {
        config: config.clone(),
        skipped_steps,
        completed_steps,
        simulated_seconds,
        opportunities,
        opportunities_after_overpractice_threshold: overpractice,
        mastered_kcs,
        per_kc,
    }
}

/// Paired differences of `other` minus `base`, student by student.
pub fn paired_difference(config_index: usize, base: &[SimReport], other: &[SimReport]) -> PairedDifference {
    let diffs = METRICS.map(|m| summarize(&base.iter().zip(other).map(|(b, o)| m(o) - m(b)).collect::<Vec<_>>()));
    let [skipped_steps, completed_steps, simulated_seconds, opportunities, overpractice, mastered_kcs] = diffs;
    PairedDifference {
        config_index,
        skipped_steps,
        completed_steps,
        simulated_seconds,
        opportunities,
        opportunities_after_overpractice_threshold: overpractice,
        mastered_kcs,
    }
}

/// Assembles a comparison from per-config population runs.
pub fn summarize_policies(configs: &[PolicyConfig], runs: &[Vec<SimReport>]) -> PolicyComparison {
    let aggregates = configs.iter().zip(runs).map(|(c, r)| aggregate_reports(c, r)).collect();
    let paired_vs_first = match runs.split_first() {
        Some((base, rest)) => rest.iter().enumerate().map(|(i, r)| paired_difference(i + 1, base, r)).collect(),
        None => Vec::new(),
    };
    PolicyComparison { students: runs.first().map_or(0, |r| r.len()), aggregates, paired_vs_first }
}

/// Runs the population under every config and compares them.
pub fn compare_policies(
    pool: &ProblemPool,
    population: &[SyntheticStudent],
    tracker: &BTreeMap<String, BktParams>,
    configs: &[PolicyConfig],
) -> Result<PolicyComparison, SimError> {
    let runs = configs
        .iter()
        .map(|c| run_population(pool, population, tracker, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_policies(configs, &runs))
}
