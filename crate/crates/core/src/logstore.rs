//! Transactions and the first-attempt student-step roll-up.
//!
//! A step *instance* is one run of attempts by a student at a (problem, step)
//! pair. It closes when an attempt is `Correct` or when the student's session
//! changes; further attempts after that open a new instance. Only the first
//! attempt of an instance feeds learning curves and model fitting, and a hint
//! on that first attempt counts as an error.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kcmodel::KcModel;

/// Timestamps above this magnitude are taken to be milliseconds.
pub const MILLIS_CUTOFF: f64 = 1e11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Correct,
    Incorrect,
    Hint,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "CORRECT",
            Outcome::Incorrect => "INCORRECT",
            Outcome::Hint => "HINT",
        }
    }

    pub fn is_correct(self) -> bool {
        self == Outcome::Correct
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown outcome {0:?}")]
pub struct UnknownOutcome(pub String);

impl FromStr for Outcome {
    type Err = UnknownOutcome;

    /// Case-insensitive: `correct`, `incorrect` / `error`, `hint`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("correct") {
            Ok(Outcome::Correct)
        } else if t.eq_ignore_ascii_case("incorrect") || t.eq_ignore_ascii_case("error") {
            Ok(Outcome::Incorrect)
        } else if t.eq_ignore_ascii_case("hint") {
            Ok(Outcome::Hint)
        } else {
            Err(UnknownOutcome(String::from(s)))
        }
    }
}

/// Converts a raw numeric timestamp to seconds. Values above
/// [`MILLIS_CUTOFF`] are read as milliseconds. Negative or non-finite
/// input yields `None`.
pub fn normalize_timestamp(raw: f64) -> Option<f64> {
    if !raw.is_finite() || raw < 0.0 {
        return None;
    }
    Some(if raw > MILLIS_CUTOFF { raw / 1000.0 } else { raw })
}

/// One logged tutor event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub student_id: String,
    pub session_id: String,
    /// Seconds since epoch.
    pub timestamp: f64,
    pub problem_id: String,
    pub step_id: String,
    /// 1 = first attempt at this step instance.
    pub attempt_index: u32,
    pub outcome: Outcome,
    pub condition_tag: Option<String>,
    pub unit_tag: Option<String>,
}

impl Transaction {
    pub fn step_key(&self) -> StepKey {
        StepKey::new(&self.problem_id, &self.step_id)
    }
}

/// Canonical transaction order: student, time, attempt, then the remaining
/// identifying fields so that the order is total.
pub fn canonical_order(a: &Transaction, b: &Transaction) -> Ordering {
    a.student_id
        .cmp(&b.student_id)
        .then(a.timestamp.total_cmp(&b.timestamp))
        .then(a.attempt_index.cmp(&b.attempt_index))
        .then_with(|| a.session_id.cmp(&b.session_id))
        .then_with(|| a.problem_id.cmp(&b.problem_id))
        .then_with(|| a.step_id.cmp(&b.step_id))
        .then(a.outcome.cmp(&b.outcome))
}

/// Sorts in place by [`canonical_order`].
pub fn sort_transactions(txs: &mut [Transaction]) {
    txs.sort_by(canonical_order);
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepKey {
    pub problem_id: String,
    pub step_id: String,
}

impl StepKey {
    pub fn new(problem_id: &str, step_id: &str) -> Self {
        Self { problem_id: problem_id.into(), step_id: step_id.into() }
    }
}

impl fmt::Display for StepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", self.problem_id, self.step_id)
    }
}

/// First-attempt summary of one step instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentStepRecord {
    pub student_id: String,
    pub session_id: String,
    pub problem_id: String,
    pub step_id: String,
    pub first_attempt_outcome: Outcome,
    pub first_attempt_time: f64,
    /// Outcome of the last attempt in the instance.
    pub final_outcome: Outcome,
    pub attempts: u32,
    pub kcs: BTreeSet<String>,
    /// KC -> 1-based count of this student's encounters with the KC,
    /// including this one.
    pub opportunity: BTreeMap<String, u32>,
    pub condition_tag: Option<String>,
    pub unit_tag: Option<String>,
}

impl StudentStepRecord {
    /// First attempt correct. Hints and errors both count as incorrect.
    pub fn is_correct(&self) -> bool {
        self.first_attempt_outcome.is_correct()
    }

    /// The instance ended with a correct attempt.
    pub fn completed(&self) -> bool {
        self.final_outcome.is_correct()
    }

    /// 0-based prior-practice count for `kc`.
    pub fn prior_opportunities(&self, kc: &str) -> Option<u32> {
        self.opportunity.get(kc).map(|&n| n - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("records are not sorted by student then first-attempt time at index {0}")]
    Unsorted(usize),
    #[error("record {index} has KC {kc:?} without an opportunity count")]
    MissingOpportunity { index: usize, kc: String },
    #[error("opportunity sequence for student {student:?}, KC {kc:?} is not 1..n (saw {found} where {expected} was expected)")]
    OpportunityGap { student: String, kc: String, expected: u32, found: u32 },
}

/// Ordered student-step records under one KC model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentStepTable {
    records: Vec<StudentStepRecord>,
    kc_model_name: String,
    students: BTreeSet<String>,
    kcs: BTreeSet<String>,
}

fn record_order(a: &StudentStepRecord, b: &StudentStepRecord) -> Ordering {
    a.student_id
        .cmp(&b.student_id)
        .then(a.first_attempt_time.total_cmp(&b.first_attempt_time))
}

impl StudentStepTable {
    /// Builds a table from records, stably sorting them by student then
    /// first-attempt time. Opportunity counts are taken as given.
    pub fn from_records(kc_model_name: impl Into<String>, mut records: Vec<StudentStepRecord>) -> Self {
        records.sort_by(record_order);
        let students = records.iter().map(|r| r.student_id.clone()).collect();
        let kcs = records.iter().flat_map(|r| r.kcs.iter().cloned()).collect();
        Self { records, kc_model_name: kc_model_name.into(), students, kcs }
    }

    pub fn records(&self) -> &[StudentStepRecord] {
        &self.records
    }

    pub fn kc_model_name(&self) -> &str {
        &self.kc_model_name
    }

    pub fn students(&self) -> &BTreeSet<String> {
        &self.students
    }

    pub fn kcs(&self) -> &BTreeSet<String> {
        &self.kcs
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose condition tag equals `condition`.
    pub fn filter_condition(&self, condition: &str) -> Self {
        let records = self
            .records
            .iter()
            .filter(|r| r.condition_tag.as_deref() == Some(condition))
            .cloned()
            .collect();
        Self::from_records(self.kc_model_name.clone(), records)
    }

    /// Distinct condition tags present, sorted.
    pub fn conditions(&self) -> BTreeSet<String> {
        self.records.iter().filter_map(|r| r.condition_tag.clone()).collect()
    }

    /// Checks ordering and the gap-free 1..n opportunity invariant.
    pub fn validate(&self) -> Result<(), TableError> {
        for (i, w) in self.records.windows(2).enumerate() {
            if record_order(&w[0], &w[1]) == Ordering::Greater {
                return Err(TableError::Unsorted(i + 1));
            }
        }
        let mut next: BTreeMap<(&str, &str), u32> = BTreeMap::new();
        for (index, r) in self.records.iter().enumerate() {
            for kc in &r.kcs {
                let Some(&found) = r.opportunity.get(kc) else {
                    return Err(TableError::MissingOpportunity { index, kc: kc.clone() });
                };
                let slot = next.entry((r.student_id.as_str(), kc.as_str())).or_insert(1);
                if found != *slot {
                    return Err(TableError::OpportunityGap {
                        student: r.student_id.clone(),
                        kc: kc.clone(),
                        expected: *slot,
                        found,
                    });
                }
                *slot += 1;
            }
        }
        Ok(())
    }
}

/// What the roll-up kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RollupDiagnostics {
    pub transactions: usize,
    pub step_instances: usize,
    pub mapped_instances: usize,
    pub unmapped_instances: usize,
    pub unmapped_steps: Vec<StepKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RollupError {
    #[error("no transactions to roll up")]
    Empty,
    #[error("KC model {0:?} maps none of the steps in the data")]
    NoMappedSteps(String),
}

struct Instance<'a> {
    first: &'a Transaction,
    last: &'a Transaction,
    attempts: u32,
    seq: usize,
}

/// Groups transactions into step instances, resolves KCs under `model` and
/// assigns per-student opportunity counts.
pub fn rollup_student_steps(
    transactions: &[Transaction],
    model: &KcModel,
) -> Result<(StudentStepTable, RollupDiagnostics), RollupError> {
    if transactions.is_empty() {
        return Err(RollupError::Empty);
    }
    let mut sorted: Vec<&Transaction> = transactions.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));

    let mut diag = RollupDiagnostics { transactions: transactions.len(), ..Default::default() };
    let mut unmapped: BTreeSet<StepKey> = BTreeSet::new();
    let mut records = Vec::new();

    let mut start = 0;
    while start < sorted.len() {
        let student = &sorted[start].student_id;
        let end = start + sorted[start..].iter().take_while(|t| &t.student_id == student).count();
        let mut instances: Vec<Instance<'_>> = Vec::new();
        let mut open: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for tx in &sorted[start..end] {
            let key = (tx.problem_id.as_str(), tx.step_id.as_str());
            match open.get(&key) {
                Some(&i) if instances[i].last.session_id == tx.session_id => {
                    let inst = &mut instances[i];
                    inst.attempts += 1;
                    inst.last = tx;
                    if tx.attempt_index < inst.first.attempt_index {
                        inst.first = tx;
                    }
                }
                _ => {
                    let seq = instances.len();
                    instances.push(Instance { first: tx, last: tx, attempts: 1, seq });
                    open.insert(key, seq);
                }
            }
            if tx.outcome.is_correct() {
                open.remove(&key);
            }
        }
        diag.step_instances += instances.len();

        instances.sort_by(|a, b| {
            a.first.timestamp.total_cmp(&b.first.timestamp).then(a.seq.cmp(&b.seq))
        });
        let mut counters: BTreeMap<&str, u32> = BTreeMap::new();
        for inst in &instances {
            let key = inst.first.step_key();
            let Some(kcs) = model.kcs_for(&key) else {
                diag.unmapped_instances += 1;
                unmapped.insert(key);
                continue;
            };
            diag.mapped_instances += 1;
            let mut opportunity = BTreeMap::new();
            for kc in kcs {
                let c = counters.entry(kc.as_str()).or_insert(0);
                *c += 1;
                opportunity.insert(kc.clone(), *c);
            }
            records.push(StudentStepRecord {
                student_id: inst.first.student_id.clone(),
                session_id: inst.first.session_id.clone(),
                problem_id: inst.first.problem_id.clone(),
                step_id: inst.first.step_id.clone(),
                first_attempt_outcome: inst.first.outcome,
                first_attempt_time: inst.first.timestamp,
                final_outcome: inst.last.outcome,
                attempts: inst.attempts,
                kcs: kcs.clone(),
                opportunity,
                condition_tag: inst.first.condition_tag.clone(),
                unit_tag: inst.first.unit_tag.clone(),
            });
        }
        start = end;
    }

    diag.unmapped_steps = unmapped.into_iter().collect();
    if records.is_empty() {
        return Err(RollupError::NoMappedSteps(model.name().into()));
    }
    Ok((StudentStepTable::from_records(model.name(), records), diag))
}
