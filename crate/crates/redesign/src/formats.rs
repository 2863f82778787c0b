//! Readers and writers for KC models, split rules, problem pools, BKT
//! parameter files and new-KC lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use redesign_core::bkt::BktCaps;
use redesign_core::policysim::{PoolStep, Problem};
use redesign_core::{BktParams, KcModel, KcModelError, ProblemPool, SplitRule, StepKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: {reason}")]
    Invalid { path: PathBuf, row: usize, reason: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    KcModel { path: PathBuf, source: KcModelError },
    #[error("{path}: {reason}")]
    Params { path: PathBuf, reason: String },
}

/// Name of a model read from `path`: the file stem.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.into(), source })
}

/// Comma-separated table with a header; `#` lines before the header are
/// skipped and header names are matched case-insensitively.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, FormatError> {
        let text = read_text(path)?;
        let mut body = text.as_str();
        while body.starts_with('#') {
            body = body.split_once('\n').map_or("", |(_, rest)| rest);
        }
        let csv_err = |source| FormatError::Csv { path: path.into(), source };
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let header = reader.headers().map_err(csv_err)?.iter().map(|h| h.to_ascii_lowercase()).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(csv_err)?;
        Ok(Self { path: path.into(), header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, FormatError> {
        self.optional(name).ok_or_else(|| FormatError::MissingColumn { path: self.path.clone(), column: name.into() })
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn invalid(&self, i: usize, reason: impl Into<String>) -> FormatError {
        FormatError::Invalid { path: self.path.clone(), row: i + 2, reason: reason.into() }
    }
}

/// KC model CSV with columns `problem, step, kc`, one row per (step, KC)
/// pair. Rows with an empty `kc` leave the step unmapped.
pub fn read_kc_model(path: &Path) -> Result<KcModel, FormatError> {
    let t = Table::read(path)?;
    let (p, s, k) = (t.column("problem")?, t.column("step")?, t.column("kc")?);
    let rows = t.rows.iter().filter(|r| !r[k].is_empty()).map(|r| (r[p].as_str(), r[s].as_str(), r[k].as_str()));
    KcModel::from_rows(stem(path), rows).map_err(|source| FormatError::KcModel { path: path.into(), source })
}

pub fn write_kc_model<W: Write>(out: W, model: &KcModel) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["problem", "step", "kc"])?;
    for (p, s, k) in model.rows() {
        w.write_record([p, s, k])?;
    }
    w.flush()?;
    Ok(())
}

/// Split-rule CSV with columns `problem, step, new_kc`.
pub fn read_split_rule(path: &Path, target_kc: &str) -> Result<SplitRule, FormatError> {
    let t = Table::read(path)?;
    let (p, s, k) = (t.column("problem")?, t.column("step")?, t.column("new_kc")?);
    let mut assignment = BTreeMap::new();
    for (i, r) in t.rows.iter().enumerate() {
        if r[k].is_empty() {
            return Err(t.invalid(i, "empty new_kc"));
        }
        if assignment.insert(StepKey::new(&r[p], &r[s]), r[k].clone()).is_some() {
            return Err(t.invalid(i, format!("step ({}, {}) assigned twice", r[p], r[s])));
        }
    }
    Ok(SplitRule::from_assignment(target_kc, assignment))
}

/// Pool CSV with columns `problem, step_order, kcs, est_step_seconds` and an
/// optional `step`. KCs are `;`-separated. Problems keep their order of
/// first appearance; steps are ordered by `step_order`.
pub fn read_pool(path: &Path) -> Result<ProblemPool, FormatError> {
    let t = Table::read(path)?;
    let p = t.column("problem")?;
    let o = t.column("step_order")?;
    let k = t.column("kcs")?;
    let d = t.column("est_step_seconds")?;
    let s = t.optional("step");

    let mut order: Vec<String> = Vec::new();
    let mut problems: BTreeMap<String, (f64, Vec<(u32, PoolStep)>)> = BTreeMap::new();
    for (i, r) in t.rows.iter().enumerate() {
        let step_order: u32 = r[o].parse().map_err(|_| t.invalid(i, format!("bad step_order {:?}", r[o])))?;
        let secs: f64 = r[d].parse().map_err(|_| t.invalid(i, format!("bad est_step_seconds {:?}", r[d])))?;
        let kcs: BTreeSet<String> = r[k].split(';').map(str::trim).filter(|x| !x.is_empty()).map(Into::into).collect();
        let step_id = s.map(|c| r[c].clone()).filter(|v| !v.is_empty()).unwrap_or_else(|| format!("step{step_order}"));
        let entry = problems.entry(r[p].clone()).or_insert_with(|| {
            order.push(r[p].clone());
            (secs, Vec::new())
        });
        if entry.0 != secs {
            return Err(t.invalid(i, format!("problem {:?} has more than one est_step_seconds", r[p])));
        }
        if entry.1.iter().any(|(n, _)| *n == step_order) {
            return Err(t.invalid(i, format!("problem {:?} repeats step_order {step_order}", r[p])));
        }
        entry.1.push((step_order, PoolStep { step_id, kcs }));
    }
    let list = order
        .into_iter()
        .map(|id| {
            let (secs, mut steps) = problems.remove(&id).expect("recorded above");
            steps.sort_by_key(|(n, _)| *n);
            Problem { problem_id: id, steps: steps.into_iter().map(|(_, s)| s).collect(), est_step_seconds: secs }
        })
        .collect();
    ProblemPool::new(list).map_err(|e| FormatError::Params { path: path.into(), reason: e.to_string() })
}

pub fn write_pool<W: Write>(out: W, pool: &ProblemPool) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["problem", "step_order", "step", "kcs", "est_step_seconds"])?;
    for p in pool.problems() {
        for (i, s) in p.steps.iter().enumerate() {
            let kcs: Vec<&str> = s.kcs.iter().map(String::as_str).collect();
            w.write_record([
                p.problem_id.as_str(),
                &(i + 1).to_string(),
                &s.step_id,
                &kcs.join(";"),
                &p.est_step_seconds.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One KC label per line; blank lines and `#` comments are ignored.
pub fn read_new_kcs(path: &Path) -> Result<BTreeSet<String>, FormatError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Into::into)
        .collect())
}

/// Per-KC BKT parameters as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsEntry {
    pub p_init: f64,
    pub p_learn: f64,
    pub p_guess: f64,
    pub p_slip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_lik: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ParamsFile {
    Wrapped { params: BTreeMap<String, ParamsEntry> },
    Bare(BTreeMap<String, ParamsEntry>),
}

pub fn params_to_entries(params: &BTreeMap<String, BktParams>) -> BTreeMap<String, ParamsEntry> {
    params
        .iter()
        .map(|(kc, p)| {
            let e = ParamsEntry { p_init: p.p_init, p_learn: p.p_learn, p_guess: p.p_guess, p_slip: p.p_slip, log_lik: p.log_lik };
            (kc.clone(), e)
        })
        .collect()
}

/// Reads `{"params": {kc: {...}}}` or a bare `{kc: {...}}` map. Supplied
/// parameters need only be probabilities; the fitting caps do not apply.
pub fn read_bkt_params(path: &Path) -> Result<BTreeMap<String, BktParams>, FormatError> {
    let text = read_text(path)?;
    let file: ParamsFile =
        serde_json::from_str(&text).map_err(|source| FormatError::Json { path: path.into(), source })?;
    let entries = match file {
        ParamsFile::Wrapped { params } | ParamsFile::Bare(params) => params,
    };
    if entries.is_empty() {
        return Err(FormatError::Params { path: path.into(), reason: "no parameters".into() });
    }
    let open = BktCaps { guess: 1.0, slip: 1.0 };
    entries
        .into_iter()
        .map(|(kc, e)| {
            let mut p = BktParams::new(kc.clone(), e.p_init, e.p_learn, e.p_guess, e.p_slip);
            p.log_lik = e.log_lik;
            p.validate(&open).map_err(|err| FormatError::Params { path: path.into(), reason: err.to_string() })?;
            Ok((kc, p))
        })
        .collect()
}
