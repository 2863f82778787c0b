//! KC models (Q-matrices), split/merge refinements and AIC-based comparison
//! of candidate models.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afm::{fit_afm, AfmConfig, AfmError, AfmFit};
use crate::logstore::{rollup_student_steps, RollupError, StepKey, Transaction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KcModelError {
    #[error("KC model has no rows")]
    EmptyModel,
    #[error("malformed KC model row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown KC {0:?}")]
    UnknownKc(String),
    #[error("split assignment misses {} step(s) mapped to the target KC", .0.len())]
    IncompleteAssignment(Vec<StepKey>),
    #[error("split assignment covers {} step(s) not mapped to the target KC", .0.len())]
    UnexpectedAssignment(Vec<StepKey>),
    #[error("new label {0:?} is never assigned")]
    UnusedNewLabel(String),
    #[error("assigned label {0:?} is not one of the declared new labels")]
    UndeclaredLabel(String),
    #[error("a split needs at least two new labels")]
    TooFewLabels,
    #[error("new label {0:?} already exists in the model")]
    LabelCollision(String),
    #[error("model comparison needs at least two candidates, got {0}")]
    TooFewCandidates(usize),
}

/// Named mapping from (problem, step) to a non-empty set of KC labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KcModel {
    name: String,
    mapping: BTreeMap<StepKey, BTreeSet<String>>,
}

impl KcModel {
    /// Builds a model from `(problem, step, kc)` rows; duplicates collapse.
    /// Row numbers in errors are 1-based positions in `rows`.
    pub fn from_rows<'a, I>(name: impl Into<String>, rows: I) -> Result<Self, KcModelError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut mapping: BTreeMap<StepKey, BTreeSet<String>> = BTreeMap::new();
        for (i, (problem, step, kc)) in rows.into_iter().enumerate() {
            let (problem, step, kc) = (problem.trim(), step.trim(), kc.trim());
            let missing = [("problem", problem), ("step", step), ("kc", kc)]
                .into_iter()
                .find(|(_, v)| v.is_empty());
            if let Some((field, _)) = missing {
                return Err(KcModelError::MalformedRow { row: i + 1, reason: alloc::format!("empty {field}") });
            }
            mapping.entry(StepKey::new(problem, step)).or_default().insert(kc.to_string());
        }
        Self::from_mapping(name, mapping)
    }

    pub fn from_mapping(
        name: impl Into<String>,
        mapping: BTreeMap<StepKey, BTreeSet<String>>,
    ) -> Result<Self, KcModelError> {
        if mapping.is_empty() {
            return Err(KcModelError::EmptyModel);
        }
        if let Some((key, _)) = mapping.iter().find(|(_, kcs)| kcs.is_empty()) {
            return Err(KcModelError::MalformedRow { row: 0, reason: alloc::format!("step {key} has no KC") });
        }
        Ok(Self { name: name.into(), mapping })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn mapping(&self) -> &BTreeMap<StepKey, BTreeSet<String>> {
        &self.mapping
    }

    pub fn kcs_for(&self, key: &StepKey) -> Option<&BTreeSet<String>> {
        self.mapping.get(key)
    }

    /// Union of all mapped KC sets.
    pub fn kc_labels(&self) -> BTreeSet<String> {
        self.mapping.values().flatten().cloned().collect()
    }

    pub fn step_count(&self) -> usize {
        self.mapping.len()
    }

    /// Steps whose KC set contains `kc`.
    pub fn steps_for(&self, kc: &str) -> BTreeSet<StepKey> {
        self.mapping
            .iter()
            .filter(|(_, kcs)| kcs.contains(kc))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// `(problem, step, kc)` rows in sorted order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.mapping.iter().flat_map(|(key, kcs)| {
            kcs.iter().map(move |kc| (key.problem_id.as_str(), key.step_id.as_str(), kc.as_str()))
        })
    }

    /// Replaces `rule.target_kc` on each of its steps by the assigned label.
    pub fn split_kc(&self, rule: &SplitRule) -> Result<Self, KcModelError> {
        let labels = self.kc_labels();
        if !labels.contains(&rule.target_kc) {
            return Err(KcModelError::UnknownKc(rule.target_kc.clone()));
        }
        let declared: BTreeSet<&String> = rule.new_labels.iter().collect();
        if declared.len() < 2 {
            return Err(KcModelError::TooFewLabels);
        }
        if let Some(l) = rule.new_labels.iter().find(|l| *l != &rule.target_kc && labels.contains(*l)) {
            return Err(KcModelError::LabelCollision(l.clone()));
        }
        if let Some(l) = rule.assignment.values().find(|l| !declared.contains(l)) {
            return Err(KcModelError::UndeclaredLabel(l.clone()));
        }
        let domain = self.steps_for(&rule.target_kc);
        let missing: Vec<StepKey> = domain.iter().filter(|k| !rule.assignment.contains_key(*k)).cloned().collect();
        if !missing.is_empty() {
            return Err(KcModelError::IncompleteAssignment(missing));
        }
        let extra: Vec<StepKey> = rule.assignment.keys().filter(|k| !domain.contains(*k)).cloned().collect();
        if !extra.is_empty() {
            return Err(KcModelError::UnexpectedAssignment(extra));
        }
        let used: BTreeSet<&String> = rule.assignment.values().collect();
        if let Some(l) = rule.new_labels.iter().find(|l| !used.contains(l)) {
            return Err(KcModelError::UnusedNewLabel(l.clone()));
        }
        let mut mapping = self.mapping.clone();
        for (key, label) in &rule.assignment {
            let kcs = mapping.get_mut(key).expect("assignment domain checked");
            kcs.remove(&rule.target_kc);
            kcs.insert(label.clone());
        }
        Ok(Self { name: self.name.clone(), mapping })
    }

    /// Replaces every label in `labels` by `new_label`.
    pub fn merge_kcs(&self, labels: &BTreeSet<String>, new_label: &str) -> Result<Self, KcModelError> {
        let known = self.kc_labels();
        if let Some(l) = labels.iter().find(|l| !known.contains(*l)) {
            return Err(KcModelError::UnknownKc(l.clone()));
        }
        let mapping = self
            .mapping
            .iter()
            .map(|(key, kcs)| {
                let merged = kcs
                    .iter()
                    .map(|k| if labels.contains(k) { new_label.to_string() } else { k.clone() })
                    .collect();
                (key.clone(), merged)
            })
            .collect();
        Ok(Self { name: self.name.clone(), mapping })
    }
}

/// Splits one KC into several, assigning each of its steps to a new label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRule {
    pub target_kc: String,
    pub new_labels: Vec<String>,
    pub assignment: BTreeMap<StepKey, String>,
}

impl SplitRule {
    /// Declares the new labels as the distinct assigned values.
    pub fn from_assignment(target_kc: impl Into<String>, assignment: BTreeMap<StepKey, String>) -> Self {
        let new_labels = assignment.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        Self { target_kc: target_kc.into(), new_labels, assignment }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcDiagnostic {
    pub kc: String,
    pub observations: usize,
    pub mean_error: f64,
    pub gamma: f64,
    /// `"positive"` or `"zero"`; slopes are bounded below by zero.
    pub slope_sign: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub name: String,
    pub n_students: usize,
    pub n_kcs: usize,
    pub n_obs: usize,
    pub n_params: usize,
    pub log_lik: f64,
    pub aic: f64,
    pub bic: f64,
    /// AIC minus the best AIC in the ranking.
    pub delta_aic: f64,
    pub iterations: usize,
    pub kcs: Vec<KcDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCandidate {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    /// Ascending AIC, then fewer parameters, then name.
    pub ranking: Vec<CandidateReport>,
    pub excluded: Vec<ExcludedCandidate>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CandidateError {
    #[error(transparent)]
    Rollup(#[from] RollupError),
    #[error(transparent)]
    Fit(#[from] AfmError),
}

/// Rolls up, fits AFM and summarizes one candidate.
pub fn evaluate_candidate(
    transactions: &[Transaction],
    model: &KcModel,
    config: &AfmConfig,
) -> Result<CandidateReport, CandidateError> {
    let (table, _) = rollup_student_steps(transactions, model)?;
    let fit = fit_afm(&table, config)?;
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in table.records() {
        for kc in &r.kcs {
            let e = counts.entry(kc.as_str()).or_default();
            e.0 += 1;
            if !r.is_correct() {
                e.1 += 1;
            }
        }
    }
    let kcs = counts
        .into_iter()
        .map(|(kc, (n, errors))| {
            let gamma = fit.gamma[kc];
            KcDiagnostic {
                kc: kc.to_string(),
                observations: n,
                mean_error: errors as f64 / n as f64,
                gamma,
                slope_sign: if gamma > 0.0 { "positive" } else { "zero" }.into(),
            }
        })
        .collect();
    Ok(report_from_fit(model.name(), &fit, table.students().len(), kcs))
}

fn report_from_fit(name: &str, fit: &AfmFit, n_students: usize, kcs: Vec<KcDiagnostic>) -> CandidateReport {
    CandidateReport {
        name: name.into(),
        n_students,
        n_kcs: fit.beta.len(),
        n_obs: fit.n_obs,
        n_params: fit.n_params,
        log_lik: fit.log_lik,
        aic: fit.aic,
        bic: fit.bic,
        delta_aic: 0.0,
        iterations: fit.iterations,
        kcs,
    }
}

/// Orders evaluated candidates and records why the others were dropped.
pub fn rank_candidates<I>(results: I) -> ModelComparison
where
    I: IntoIterator<Item = (String, Result<CandidateReport, CandidateError>)>,
{
    let mut ranking = Vec::new();
    let mut excluded = Vec::new();
    for (name, result) in results {
        match result {
            Ok(r) => ranking.push(r),
            Err(e) => excluded.push(ExcludedCandidate { name, reason: e.to_string() }),
        }
    }
    ranking.sort_by(|a: &CandidateReport, b: &CandidateReport| {
        a.aic
            .total_cmp(&b.aic)
            .then(a.n_params.cmp(&b.n_params))
            .then_with(|| a.name.cmp(&b.name))
            .then(a.log_lik.total_cmp(&b.log_lik))
    });
    if let Some(best) = ranking.first().map(|r| r.aic) {
        for r in &mut ranking {
            r.delta_aic = r.aic - best;
        }
    }
    excluded.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.reason.cmp(&b.reason)));
    ModelComparison { ranking, excluded }
}

/// Fits every candidate and ranks them by AIC.
pub fn compare_models(
    transactions: &[Transaction],
    candidates: &[KcModel],
    config: &AfmConfig,
) -> Result<ModelComparison, KcModelError> {
    if candidates.len() < 2 {
        return Err(KcModelError::TooFewCandidates(candidates.len()));
    }
    Ok(rank_candidates(
        candidates
            .iter()
            .map(|m| (m.name().to_string(), evaluate_candidate(transactions, m, config))),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afm::parameter_count;
    use alloc::vec;

    fn key(p: &str, s: &str) -> StepKey {
        StepKey::new(p, s)
    }

    fn read_point_model() -> KcModel {
        let rows: Vec<(String, String, String)> = (0..10)
            .map(|i| (alloc::format!("graph{}", i / 2), alloc::format!("read{}", i % 2), "read-point".into()))
            .chain([("graph0".into(), "label".into(), "axis-label".into())])
            .collect();
        KcModel::from_rows("base", rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))).unwrap()
    }

    fn interp_rule(model: &KcModel) -> SplitRule {
        let assignment = model
            .steps_for("read-point")
            .into_iter()
            .map(|k| {
                let label = if k.step_id == "read1" { "read-point-interp" } else { "read-point-grid" };
                (k, label.to_string())
            })
            .collect();
        SplitRule::from_assignment("read-point", assignment)
    }

    #[test]
    fn load_two_rows_one_step() {
        let m = KcModel::from_rows("m", [("p", "s", "k1"), ("p", "s", "k2")]).unwrap();
        assert_eq!(m.step_count(), 1);
        assert_eq!(m.kc_labels().len(), 2);
    }

    #[test]
    fn empty_and_malformed_rows() {
        assert_eq!(KcModel::from_rows("m", []).unwrap_err(), KcModelError::EmptyModel);
        assert!(matches!(
            KcModel::from_rows("m", [("p", "s", "k"), ("p", "", "k")]),
            Err(KcModelError::MalformedRow { row: 2, .. })
        ));
    }

    #[test]
    fn duplicate_rows_collapse() {
        let a = KcModel::from_rows("m", [("p", "s", "k1"), ("p", "s", "k2")]).unwrap();
        let b = KcModel::from_rows("m", [("p", "s", "k1"), ("p", "s", "k2"), ("p", "s", "k1")]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_adds_one_kc_keeps_steps() {
        let m = read_point_model();
        let split = m.split_kc(&interp_rule(&m)).unwrap();
        assert_eq!(split.kc_labels().len(), m.kc_labels().len() + 1);
        assert_eq!(split.step_count(), m.step_count());
        assert_eq!(split.kcs_for(&key("graph0", "label")), m.kcs_for(&key("graph0", "label")));
        assert!(!split.kc_labels().contains("read-point"));
    }

    #[test]
    fn two_splits_add_two_skills() {
        let m = read_point_model();
        let once = m.split_kc(&interp_rule(&m)).unwrap();
        let assignment = once
            .steps_for("read-point-grid")
            .into_iter()
            .map(|k| {
                let l = if k.problem_id.as_str() < "graph3" { "grid-a" } else { "grid-b" };
                (k, l.to_string())
            })
            .collect();
        let twice = once.split_kc(&SplitRule::from_assignment("read-point-grid", assignment)).unwrap();
        assert_eq!(twice.kc_labels().len(), m.kc_labels().len() + 2);
    }

    #[test]
    fn split_errors() {
        let m = read_point_model();
        let mut rule = interp_rule(&m);
        rule.assignment.remove(&key("graph0", "read0"));
        assert_eq!(m.split_kc(&rule).unwrap_err(), KcModelError::IncompleteAssignment(vec![key("graph0", "read0")]));

        let mut rule = interp_rule(&m);
        rule.target_kc = "nope".into();
        assert_eq!(m.split_kc(&rule).unwrap_err(), KcModelError::UnknownKc("nope".into()));

        let mut rule = interp_rule(&m);
        rule.new_labels.push("read-point-extra".into());
        assert_eq!(m.split_kc(&rule).unwrap_err(), KcModelError::UnusedNewLabel("read-point-extra".into()));

        let mut rule = interp_rule(&m);
        rule.assignment.insert(key("graph0", "label"), "read-point-grid".into());
        assert!(matches!(m.split_kc(&rule), Err(KcModelError::UnexpectedAssignment(_))));

        let mut rule = interp_rule(&m);
        rule.new_labels = vec!["read-point-grid".into(), "axis-label".into()];
        assert!(matches!(m.split_kc(&rule), Err(KcModelError::LabelCollision(_))));
    }

    #[test]
    fn split_then_merge_restores() {
        let m = read_point_model();
        let rule = interp_rule(&m);
        let split = m.split_kc(&rule).unwrap();
        let labels: BTreeSet<String> = rule.new_labels.iter().cloned().collect();
        assert_eq!(split.merge_kcs(&labels, "read-point").unwrap(), m);
    }

    #[test]
    fn merge_uses_set_semantics() {
        let m = KcModel::from_rows("m", [("p", "s", "a"), ("p", "s", "b"), ("p", "t", "d")]).unwrap();
        let labels: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let merged = m.merge_kcs(&labels, "c").unwrap();
        assert_eq!(merged.kcs_for(&key("p", "s")).unwrap().len(), 1);
        assert!(merged.kcs_for(&key("p", "s")).unwrap().contains("c"));
        let one: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        assert_eq!(m.merge_kcs(&one, "a").unwrap(), m);
        let unknown: BTreeSet<String> = ["z".to_string()].into_iter().collect();
        assert_eq!(m.merge_kcs(&unknown, "c").unwrap_err(), KcModelError::UnknownKc("z".into()));
    }

    #[test]
    fn merge_drops_two_kc_parameters() {
        let m = KcModel::from_rows("m", [("p", "s", "a"), ("p", "t", "b"), ("p", "u", "d")]).unwrap();
        let labels: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let merged = m.merge_kcs(&labels, "c").unwrap();
        let students = 7;
        assert_eq!(
            parameter_count(students, m.kc_labels().len(), false) - parameter_count(students, merged.kc_labels().len(), false),
            2
        );
    }
}
