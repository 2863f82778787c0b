//! Process measures from logs: time-on-task, productivity, practice
//! allocation, and knowledge summaries by condition.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afm::KnowledgeEstimate;
use crate::bkt::{BktParams, Observation};
use crate::logstore::{StudentStepTable, Transaction};
use crate::stats::{summarize, Summary};

/// How an idle gap is subtracted from logged-in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleAttribution {
    /// The whole gap is idle.
    #[default]
    WholeGap,
    /// Only the part of the gap beyond the threshold is idle.
    ExcessOverThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeConfig {
    pub idle_threshold_seconds: f64,
    pub attribution: IdleAttribution,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { idle_threshold_seconds: crate::DEFAULT_IDLE_THRESHOLD_SECS, attribution: IdleAttribution::WholeGap }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub student: String,
    pub session: String,
    /// Last minus first transaction time in the session.
    pub logged_in_seconds: f64,
    pub idle_seconds: f64,
    pub active_seconds: f64,
}

/// Logged-in, idle and active time per (student, session). A gap is idle
/// only when strictly longer than the threshold.
pub fn time_on_task(transactions: &[Transaction], config: &TimeConfig) -> Vec<TimeBreakdown> {
    let mut sessions: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for t in transactions {
        sessions.entry((t.student_id.as_str(), t.session_id.as_str())).or_default().push(t.timestamp);
    }
    sessions
        .into_iter()
        .map(|((student, session), mut times)| {
            times.sort_by(f64::total_cmp);
            let first = times[0];
            let last = times[times.len() - 1];
            let idle: f64 = times
                .windows(2)
                .map(|w| w[1] - w[0])
                .filter(|&gap| gap > config.idle_threshold_seconds)
                .map(|gap| match config.attribution {
                    IdleAttribution::WholeGap => gap,
                    IdleAttribution::ExcessOverThreshold => gap - config.idle_threshold_seconds,
                })
                .fold(0.0, |a, b| a + b);
            let logged_in = last - first;
            TimeBreakdown {
                student: student.into(),
                session: session.into(),
                logged_in_seconds: logged_in,
                idle_seconds: idle,
                active_seconds: logged_in - idle,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductivityRow {
    pub student: String,
    pub condition: Option<String>,
    pub unit: Option<String>,
    pub completed_steps: usize,
}

/// Step instances finished with a correct attempt, per student x condition x unit.
pub fn productivity(table: &StudentStepTable) -> Vec<ProductivityRow> {
    let mut acc: BTreeMap<(&str, Option<&str>, Option<&str>), usize> = BTreeMap::new();
    for r in table.records() {
        let e = acc
            .entry((r.student_id.as_str(), r.condition_tag.as_deref(), r.unit_tag.as_deref()))
            .or_default();
        if r.completed() {
            *e += 1;
        }
    }
    acc.into_iter()
        .map(|((s, c, u), n)| ProductivityRow {
            student: s.into(),
            condition: c.map(Into::into),
            unit: u.map(Into::into),
            completed_steps: n,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KcType {
    New,
    Established,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub condition: Option<String>,
    pub kc: String,
    pub kc_type: KcType,
    pub opportunities: u32,
    pub opportunities_after_overpractice: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("new-KC list names {0:?}, which is not in the data")]
    UnknownKc(String),
    #[error("no BKT parameters for KC {0:?}")]
    MissingParams(String),
}

/// (opportunity, condition, observation)
type Visit<'a> = (u32, Option<&'a str>, Observation);

/// Opportunities per (condition, KC) and how many of them came after the
/// traced mastery had already reached `overpractice_threshold`.
///
/// Each student's KC trace runs across conditions in opportunity order;
/// every opportunity is credited to the condition of its own record.
pub fn opportunity_allocation(
    table: &StudentStepTable,
    new_kcs: &BTreeSet<String>,
    params: &BTreeMap<String, BktParams>,
    overpractice_threshold: f64,
) -> Result<Vec<AllocationRow>, MetricsError> {
    if let Some(kc) = new_kcs.iter().find(|k| !table.kcs().contains(*k)) {
        return Err(MetricsError::UnknownKc(kc.clone()));
    }
    if let Some(kc) = table.kcs().iter().find(|k| !params.contains_key(*k)) {
        return Err(MetricsError::MissingParams(kc.clone()));
    }
    let mut seqs: BTreeMap<(&str, &str), Vec<Visit>> = BTreeMap::new();
    for r in table.records() {
        for (kc, &n) in &r.opportunity {
            seqs.entry((r.student_id.as_str(), kc.as_str())).or_default().push((
                n,
                r.condition_tag.as_deref(),
                r.first_attempt_outcome.into(),
            ));
        }
    }
    let mut acc: BTreeMap<(Option<&str>, &str), (u32, u32)> = BTreeMap::new();
    for ((_, kc), mut seq) in seqs {
        seq.sort_by_key(|(n, _, _)| *n);
        let p = &params[kc];
        let mut know = p.p_init;
        for (_, cond, obs) in seq {
            let e = acc.entry((cond, kc)).or_default();
            e.0 += 1;
            if know >= overpractice_threshold {
                e.1 += 1;
            }
            know = p.update(know, obs);
        }
    }
    Ok(acc
        .into_iter()
        .map(|((cond, kc), (n, after))| AllocationRow {
            condition: cond.map(Into::into),
            kc: kc.into(),
            kc_type: if new_kcs.contains(kc) { KcType::New } else { KcType::Established },
            opportunities: n,
            opportunities_after_overpractice: after,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionKnowledge {
    pub condition: String,
    pub students: usize,
    pub total: Summary,
    pub average: Summary,
    pub mastered_count: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedKnowledge {
    pub student: String,
    /// Second condition minus first, in sorted condition order.
    pub total_diff: f64,
    pub average_diff: f64,
    pub mastered_count_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub sd_convention: String,
    pub conditions: Vec<ConditionKnowledge>,
    /// Present when exactly two conditions are observed.
    pub paired_conditions: Option<(String, String)>,
    pub paired: Vec<PairedKnowledge>,
    pub paired_total: Option<Summary>,
    pub paired_average: Option<Summary>,
    pub paired_mastered_count: Option<Summary>,
}

/// Means and sample SDs per condition, plus within-student differences when
/// the same students were observed under both of two conditions.
pub fn knowledge_summary(estimates: &[(String, KnowledgeEstimate)]) -> KnowledgeSummary {
    let mut by_cond: BTreeMap<&str, Vec<&KnowledgeEstimate>> = BTreeMap::new();
    for (c, e) in estimates {
        by_cond.entry(c.as_str()).or_default().push(e);
    }
    let col = |v: &[&KnowledgeEstimate], f: fn(&KnowledgeEstimate) -> f64| {
        summarize(&v.iter().map(|e| f(e)).collect::<Vec<_>>())
    };
    let conditions = by_cond
        .iter()
        .map(|(c, v)| ConditionKnowledge {
            condition: (*c).into(),
            students: v.len(),
            total: col(v, |e| e.total),
            average: col(v, |e| e.average),
            mastered_count: col(v, |e| e.mastered_count as f64),
        })
        .collect();

    let mut summary = KnowledgeSummary {
        sd_convention: "sample (n-1)".into(),
        conditions,
        paired_conditions: None,
        paired: Vec::new(),
        paired_total: None,
        paired_average: None,
        paired_mastered_count: None,
    };
    if by_cond.len() == 2 {
        let mut it = by_cond.iter();
        let (ca, a) = it.next().expect("two conditions");
        let (cb, b) = it.next().expect("two conditions");
        let b_map: BTreeMap<&str, &KnowledgeEstimate> = b.iter().map(|e| (e.student.as_str(), *e)).collect();
        let mut firsts: Vec<&&KnowledgeEstimate> = a.iter().collect();
        firsts.sort_by(|x, y| x.student.cmp(&y.student));
        for ea in firsts {
            if let Some(eb) = b_map.get(ea.student.as_str()) {
                summary.paired.push(PairedKnowledge {
                    student: ea.student.clone(),
                    total_diff: eb.total - ea.total,
                    average_diff: eb.average - ea.average,
                    mastered_count_diff: eb.mastered_count as f64 - ea.mastered_count as f64,
                });
            }
        }
        summary.paired_conditions = Some(((*ca).into(), (*cb).into()));
        if !summary.paired.is_empty() {
            let p = &summary.paired;
            summary.paired_total = Some(summarize(&p.iter().map(|d| d.total_diff).collect::<Vec<_>>()));
            summary.paired_average = Some(summarize(&p.iter().map(|d| d.average_diff).collect::<Vec<_>>()));
            summary.paired_mastered_count =
                Some(summarize(&p.iter().map(|d| d.mastered_count_diff).collect::<Vec<_>>()));
        }
    }
    summary
}
