//! Seeded synthetic logs drawn from known AFM or BKT parameters.
//!
//! These generators are the ground truth that parameter-recovery tests and
//! the bundled CLI fixture are built from.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bkt::{BktParams, Observation};
use crate::kcmodel::KcModel;
use crate::logstore::{Outcome, Transaction};
use crate::math::sigmoid;

/// Deterministic rng for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfmSynthConfig {
    pub n_students: usize,
    /// Opportunities per student per KC.
    pub opportunities: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta_sd: f64,
    /// Effect applied in the second condition of `conditions`.
    pub delta: f64,
    /// `(baseline, treated)`; each student switches halfway through,
    /// half the students starting in each condition.
    pub conditions: Option<(String, String)>,
    pub unit: Option<String>,
    pub sessions_per_student: usize,
    pub step_seconds: f64,
    /// Insert an idle gap of `idle_gap_seconds` before every n-th step.
    pub idle_every: Option<usize>,
    pub idle_gap_seconds: f64,
    /// Fraction of incorrect first attempts logged as hints.
    pub hint_fraction: f64,
    pub seed: u64,
}

impl AfmSynthConfig {
    /// KC difficulties in [-1.5, 1.5] and slopes in [0.02, 0.35], drawn from `seed`.
    pub fn random_kcs(n_students: usize, n_kcs: usize, opportunities: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, u64::MAX);
        let beta = (0..n_kcs).map(|_| rng.random_range(-1.5..1.5)).collect();
        let gamma = (0..n_kcs).map(|_| rng.random_range(0.02..0.35)).collect();
        Self::with_kcs(n_students, opportunities, beta, gamma, seed)
    }

    pub fn with_kcs(n_students: usize, opportunities: usize, beta: Vec<f64>, gamma: Vec<f64>, seed: u64) -> Self {
        assert_eq!(beta.len(), gamma.len());
        Self {
            n_students,
            opportunities,
            beta,
            gamma,
            theta_sd: 1.0,
            delta: 0.0,
            conditions: None,
            unit: None,
            sessions_per_student: 1,
            step_seconds: 20.0,
            idle_every: None,
            idle_gap_seconds: 300.0,
            hint_fraction: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLog {
    pub transactions: Vec<Transaction>,
    /// Maps step `S<k>` of every problem to `KC<k>`.
    pub model: KcModel,
    pub theta: Vec<(String, f64)>,
}

pub fn student_id(i: usize) -> String {
    format!("stu{i:04}")
}

pub fn kc_label(k: usize) -> String {
    format!("KC{k:02}")
}

/// Draws a transaction log from AFM. Practice is interleaved: problem `P<j>`
/// holds one step per KC, so every KC gets its j-th opportunity there.
/// Incorrect first attempts are followed by a correct retry.
pub fn afm_log(config: &AfmSynthConfig) -> SyntheticLog {
    let n_kcs = config.beta.len();
    let normal = Normal::new(0.0, config.theta_sd).expect("finite sd");
    let mut transactions = Vec::new();
    let mut theta = Vec::with_capacity(config.n_students);
    let per_session = config.opportunities.div_ceil(config.sessions_per_student.max(1)).max(1);
    for i in 0..config.n_students {
        let mut rng = rng_for(config.seed, i as u64);
        let student = student_id(i);
        let th: f64 = normal.sample(&mut rng);
        theta.push((student.clone(), th));
        let mut t = 1_600_000_000.0 + (i as f64) * 7.0;
        let mut steps_done = 0usize;
        for j in 0..config.opportunities {
            let session = format!("{student}-s{}", j / per_session);
            if j > 0 && j % per_session == 0 {
                t += 3600.0;
            }
            let condition = config.conditions.as_ref().map(|(base, treat)| {
                let first_half = j < config.opportunities / 2;
                let starts_treated = i % 2 == 1;
                if first_half == starts_treated { treat.clone() } else { base.clone() }
            });
            let treated = match (&config.conditions, &condition) {
                (Some((_, treat)), Some(c)) => c == treat,
                _ => false,
            };
            for k in 0..n_kcs {
                if let Some(n) = config.idle_every {
                    if steps_done > 0 && steps_done.is_multiple_of(n) {
                        t += config.idle_gap_seconds;
                    }
                }
                steps_done += 1;
                let eta = th
                    + config.beta[k]
                    + config.gamma[k] * j as f64
                    + if treated { config.delta } else { 0.0 };
                let correct = rng.random_bool(sigmoid(eta));
                let base = Transaction {
                    student_id: student.clone(),
                    session_id: session.clone(),
                    timestamp: t,
                    problem_id: format!("P{j:03}"),
                    step_id: format!("S{k:02}"),
                    attempt_index: 1,
                    outcome: Outcome::Correct,
                    condition_tag: condition.clone(),
                    unit_tag: config.unit.clone(),
                };
                t += config.step_seconds;
                if correct {
                    transactions.push(base);
                } else {
                    let hint = config.hint_fraction > 0.0 && rng.random_bool(config.hint_fraction);
                    let outcome = if hint { Outcome::Hint } else { Outcome::Incorrect };
                    transactions.push(Transaction { outcome, ..base.clone() });
                    transactions.push(Transaction { timestamp: t, attempt_index: 2, ..base });
                    t += config.step_seconds;
                }
            }
        }
    }
    let rows: Vec<(String, String, String)> = (0..config.opportunities)
        .flat_map(|j| (0..n_kcs).map(move |k| (format!("P{j:03}"), format!("S{k:02}"), kc_label(k))))
        .collect();
    let model = KcModel::from_rows("synthetic", rows.iter().map(|(p, s, k)| (p.as_str(), s.as_str(), k.as_str())))
        .expect("non-empty synthetic model");
    SyntheticLog { transactions, model, theta }
}

/// Samples one student's observation sequence from a BKT process.
pub fn bkt_sequence<R: Rng + ?Sized>(params: &BktParams, len: usize, rng: &mut R) -> Vec<Observation> {
    let mut known = rng.random_bool(params.p_init);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let p_correct = if known { 1.0 - params.p_slip } else { params.p_guess };
        out.push(if rng.random_bool(p_correct) { Observation::Correct } else { Observation::Incorrect });
        if !known && rng.random_bool(params.p_learn) {
            known = true;
        }
    }
    out
}

/// `n_students` independent BKT sequences of length `len`.
pub fn bkt_sequences(params: &BktParams, n_students: usize, len: usize, seed: u64) -> Vec<Vec<Observation>> {
    (0..n_students)
        .map(|i| bkt_sequence(params, len, &mut rng_for(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::rollup_student_steps;

    #[test]
    fn afm_log_is_deterministic_and_rolls_up() {
        let cfg = AfmSynthConfig::random_kcs(5, 4, 3, 11);
        let a = afm_log(&cfg);
        let b = afm_log(&cfg);
        assert_eq!(a.transactions, b.transactions);
        let (table, diag) = rollup_student_steps(&a.transactions, &a.model).unwrap();
        assert_eq!(table.len(), 5 * 4 * 3);
        assert_eq!(diag.unmapped_instances, 0);
        table.validate().unwrap();
        assert!(table.records().iter().all(|r| r.completed()));
    }

    #[test]
    fn crossover_splits_conditions_within_student() {
        let mut cfg = AfmSynthConfig::random_kcs(2, 2, 4, 3);
        cfg.conditions = Some(("original".into(), "redesigned".into()));
        let log = afm_log(&cfg);
        for s in ["stu0000", "stu0001"] {
            let tags: alloc::collections::BTreeSet<_> = log
                .transactions
                .iter()
                .filter(|t| t.student_id == s)
                .filter_map(|t| t.condition_tag.clone())
                .collect();
            assert_eq!(tags.len(), 2);
        }
    }
}
