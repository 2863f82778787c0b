//! Tab-separated transaction logs in the DataShop export layout, and the
//! canonical re-export.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use redesign_core::logstore::{normalize_timestamp, sort_transactions};
use redesign_core::{Outcome, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column names for each transaction field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatSpec {
    pub student: String,
    pub session: String,
    pub time: String,
    pub problem: String,
    pub step: String,
    pub attempt: String,
    pub outcome: String,
    /// Read when the header has it; tags stay empty otherwise.
    pub condition: Option<String>,
    pub unit: Option<String>,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            student: "Anon Student Id".into(),
            session: "Session Id".into(),
            time: "Time".into(),
            problem: "Problem Name".into(),
            step: "Step Name".into(),
            attempt: "Attempt At Step".into(),
            outcome: "Outcome".into(),
            condition: Some("Condition".into()),
            unit: Some("Level (Unit)".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Row errors kept before the rest are only counted.
    pub max_row_errors: usize,
    /// Drop bad rows instead of failing.
    pub lenient: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { max_row_errors: 20, lenient: false }
    }
}

/// A rejected data row. Rows are numbered from 1 at the header.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowError {
    #[error("row {row}: bad timestamp {value:?}")]
    BadTimestamp { row: usize, value: String },
    #[error("row {row}: unknown outcome {value:?}")]
    UnknownOutcome { row: usize, value: String },
    #[error("row {row}: bad attempt number {value:?}")]
    BadAttempt { row: usize, value: String },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("malformed TSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("{total} bad row(s); first: {}", .errors[0])]
    Rows { errors: Vec<RowError>, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub data_rows: usize,
    pub transactions: usize,
    pub dropped_rows: usize,
    /// The first `max_row_errors` dropped rows.
    pub dropped: Vec<RowError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub transactions: Vec<Transaction>,
    pub diagnostics: IngestDiagnostics,
}

struct Columns {
    student: usize,
    session: usize,
    time: usize,
    problem: usize,
    step: usize,
    attempt: usize,
    outcome: usize,
    condition: Option<usize>,
    unit: Option<usize>,
}

impl Columns {
    fn locate(header: &csv::StringRecord, spec: &FormatSpec) -> Result<Self, IngestError> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.into()));
        Ok(Self {
            student: need(&spec.student)?,
            session: need(&spec.session)?,
            time: need(&spec.time)?,
            problem: need(&spec.problem)?,
            step: need(&spec.step)?,
            attempt: need(&spec.attempt)?,
            outcome: need(&spec.outcome)?,
            condition: spec.condition.as_deref().and_then(find),
            unit: spec.unit.as_deref().and_then(find),
        })
    }
}

/// Seconds, milliseconds, or a `YYYY-MM-DD HH:MM:SS[.fff]` UTC time.
pub fn parse_timestamp(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if let Ok(v) = t.parse::<f64>() {
        return normalize_timestamp(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, fmt) {
            let utc = dt.and_utc();
            return normalize_timestamp(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) / 1e9);
        }
    }
    None
}

fn tag(record: &csv::StringRecord, col: Option<usize>) -> Option<String> {
    col.and_then(|i| record.get(i)).filter(|v| !v.is_empty()).map(Into::into)
}

fn parse_row(record: &csv::StringRecord, cols: &Columns, row: usize) -> Result<Transaction, RowError> {
    let field = |i: usize| record.get(i).unwrap_or("");
    let time = field(cols.time);
    let timestamp = parse_timestamp(time).ok_or_else(|| RowError::BadTimestamp { row, value: time.into() })?;
    let attempt = field(cols.attempt);
    let attempt_index = match attempt.trim().parse::<u32>() {
        Ok(n) if n >= 1 => n,
        _ => return Err(RowError::BadAttempt { row, value: attempt.into() }),
    };
    let outcome_raw = field(cols.outcome);
    let outcome: Outcome =
        outcome_raw.parse().map_err(|_| RowError::UnknownOutcome { row, value: outcome_raw.into() })?;
    Ok(Transaction {
        student_id: field(cols.student).into(),
        session_id: field(cols.session).into(),
        timestamp,
        problem_id: field(cols.problem).into(),
        step_id: field(cols.step).into(),
        attempt_index,
        outcome,
        condition_tag: tag(record, cols.condition),
        unit_tag: tag(record, cols.unit),
    })
}

/// Parses a log held in memory. `#` lines before the header are skipped.
pub fn parse_transactions(text: &str, spec: &FormatSpec, options: &IngestOptions) -> Result<Ingested, IngestError> {
    let mut body = text;
    while body.starts_with('#') {
        body = body.split_once('\n').map_or("", |(_, rest)| rest);
    }
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_reader(body.as_bytes());
    let cols = Columns::locate(reader.headers()?, spec)?;

    let mut transactions = Vec::new();
    let mut errors = Vec::new();
    let mut total_errors = 0;
    let mut data_rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        data_rows += 1;
        match parse_row(&record, &cols, i + 2) {
            Ok(t) => transactions.push(t),
            Err(e) => {
                total_errors += 1;
                if errors.len() < options.max_row_errors.max(1) {
                    errors.push(e);
                }
            }
        }
    }
    if total_errors > 0 && !options.lenient {
        return Err(IngestError::Rows { errors, total: total_errors });
    }
    sort_transactions(&mut transactions);
    Ok(Ingested {
        diagnostics: IngestDiagnostics {
            data_rows,
            transactions: transactions.len(),
            dropped_rows: total_errors,
            dropped: errors,
        },
        transactions,
    })
}

/// Reads and parses a log file; the result is sorted by student, time and attempt.
pub fn ingest_transactions(path: &Path, spec: &FormatSpec, options: &IngestOptions) -> Result<Ingested, IngestError> {
    let text = fs::read_to_string(path)?;
    parse_transactions(&text, spec, options)
}

/// Writes transactions with the default column names. Timestamps are
/// written in seconds with round-trip precision.
pub fn write_transactions<W: Write>(out: W, transactions: &[Transaction]) -> Result<(), csv::Error> {
    let spec = FormatSpec::default();
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    w.write_record([
        spec.student.as_str(),
        &spec.session,
        &spec.time,
        &spec.problem,
        &spec.step,
        &spec.attempt,
        &spec.outcome,
        spec.condition.as_deref().unwrap_or_default(),
        spec.unit.as_deref().unwrap_or_default(),
    ])?;
    for t in transactions {
        w.write_record([
            t.student_id.as_str(),
            &t.session_id,
            &t.timestamp.to_string(),
            &t.problem_id,
            &t.step_id,
            &t.attempt_index.to_string(),
            t.outcome.as_str(),
            t.condition_tag.as_deref().unwrap_or(""),
            t.unit_tag.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Anon Student Id\tSession Id\tTime\tProblem Name\tStep Name\tAttempt At Step\tOutcome\n";

    fn parse(body: &str) -> Result<Ingested, IngestError> {
        parse_transactions(&format!("{HEADER}{body}"), &FormatSpec::default(), &IngestOptions::default())
    }

    #[test]
    fn three_rows_in_time_order() {
        let got = parse("a\tx\t30\tp\ts3\t1\tINCORRECT\na\tx\t10\tp\ts1\t1\tCORRECT\na\tx\t20\tp\ts2\t1\tHINT\n")
            .unwrap()
            .transactions;
        let outcomes: Vec<_> = got.iter().map(|t| t.outcome).collect();
        assert_eq!(outcomes, [Outcome::Correct, Outcome::Hint, Outcome::Incorrect]);
        assert_eq!(got[0].timestamp, 10.0);
        assert!(got[0].condition_tag.is_none());
    }

    #[test]
    fn header_only_is_empty() {
        let got = parse("").unwrap();
        assert!(got.transactions.is_empty());
        assert_eq!(got.diagnostics.data_rows, 0);
    }

    #[test]
    fn unknown_outcome_carries_row() {
        match parse("a\tx\t1\tp\ts\t1\tok\n") {
            Err(IngestError::Rows { errors, total }) => {
                assert_eq!(total, 1);
                assert_eq!(errors[0], RowError::UnknownOutcome { row: 2, value: "ok".into() });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outcome_normalization_table() {
        for (raw, want) in [
            ("correct", Some(Outcome::Correct)),
            ("CORRECT", Some(Outcome::Correct)),
            ("Correct", Some(Outcome::Correct)),
            ("incorrect", Some(Outcome::Incorrect)),
            ("ERROR", Some(Outcome::Incorrect)),
            ("error", Some(Outcome::Incorrect)),
            ("hint", Some(Outcome::Hint)),
            ("HINT", Some(Outcome::Hint)),
            ("ok", None),
            ("", None),
            ("corect", None),
        ] {
            let got = parse(&format!("a\tx\t1\tp\ts\t1\t{raw}\n"));
            match want {
                Some(o) => assert_eq!(got.unwrap().transactions[0].outcome, o, "{raw}"),
                None => assert!(matches!(got, Err(IngestError::Rows { .. })), "{raw}"),
            }
        }
    }

    #[test]
    fn missing_column() {
        let err = parse_transactions("Anon Student Id\tTime\n", &FormatSpec::default(), &IngestOptions::default());
        assert!(matches!(err, Err(IngestError::MissingColumn(c)) if c == "Session Id"));
    }

    #[test]
    fn bad_rows_are_capped_or_dropped() {
        let body = "a\tx\tnoon\tp\ts\t1\tCORRECT\n".repeat(5) + "a\tx\t1\tp\ts\t1\tCORRECT\n";
        let text = format!("{HEADER}{body}");
        let strict = IngestOptions { max_row_errors: 2, lenient: false };
        match parse_transactions(&text, &FormatSpec::default(), &strict) {
            Err(IngestError::Rows { errors, total }) => {
                assert_eq!(total, 5);
                assert_eq!(errors.len(), 2);
                assert_eq!(errors[1], RowError::BadTimestamp { row: 3, value: "noon".into() });
            }
            other => panic!("{other:?}"),
        }
        let lenient = IngestOptions { max_row_errors: 2, lenient: true };
        let got = parse_transactions(&text, &FormatSpec::default(), &lenient).unwrap();
        assert_eq!(got.transactions.len(), 1);
        assert_eq!(got.diagnostics.dropped_rows, 5);
    }

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp("1284000000"), Some(1_284_000_000.0));
        assert_eq!(parse_timestamp("1284000000500"), Some(1_284_000_000.5));
        assert_eq!(parse_timestamp("2010-09-09 02:40:00"), Some(1_284_000_000.0));
        assert_eq!(parse_timestamp("2010-09-09 02:40:00.25"), Some(1_284_000_000.25));
        assert_eq!(parse_timestamp("-3"), None);
        assert_eq!(parse_timestamp("soon"), None);
    }

    #[test]
    fn custom_columns_and_tags() {
        let spec = FormatSpec {
            student: "who".into(),
            condition: Some("cond".into()),
            unit: None,
            ..FormatSpec::default()
        };
        let text = "# config_hash=abc\nwho\tSession Id\tTime\tProblem Name\tStep Name\tAttempt At Step\tOutcome\tcond\n\
                    a\tx\t1\tp\ts\t1\tcorrect\tredesigned\nb\tx\t1\tp\ts\t1\tcorrect\t\n";
        let got = parse_transactions(text, &spec, &IngestOptions::default()).unwrap().transactions;
        assert_eq!(got[0].condition_tag.as_deref(), Some("redesigned"));
        assert_eq!(got[1].condition_tag, None);
    }
}
