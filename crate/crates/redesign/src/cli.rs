//! The `redesign` command line.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use redesign_core::afm::{afm_condition_effect, fit_afm, knowledge_estimates};
use redesign_core::bkt::{bkt_knowledge_estimates, fit_bkt, kc_sequences};
use redesign_core::kcmodel::{evaluate_candidate, rank_candidates};
use redesign_core::learncurve::{all_curves, flag_kcs};
use redesign_core::logstore::rollup_student_steps;
use redesign_core::policysim::{
    aggregate_reports, bkt_population, simulate_practice, summarize_policies, PolicyConfig, Selection,
};
use redesign_core::procmetrics::{knowledge_summary, opportunity_allocation, productivity, time_on_task, KcType};
use redesign_core::stats::summarize;
use redesign_core::{
    AfmError, AfmFit, BktParams, KcModel, KnowledgeEstimate, Observation, SimReport, StudentStepTable, Transaction,
};
use serde_json::json;

use crate::config::{Effective, Settings};
use crate::formats::{self, params_to_entries};
use crate::ingest::{ingest_transactions, write_transactions, Ingested};
use crate::output::{file_sha256, num, opt_num, InputFile, RunOutput};
use crate::plot::{curve_svg, file_label};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "redesign", version, about = "Data-driven tutor redesign: student models, KC refinement, policy simulation and process metrics")]
#[command(propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Parse a transaction log; write the canonical TSV and diagnostics
    Ingest,
    /// Learning curves (CSV, SVG) with AFM predictions and KC flags
    Curves,
    /// Fit AFM, optionally with a condition effect
    FitAfm,
    /// Fit (or load) BKT parameters and trace knowledge
    FitBkt,
    /// Rank KC models by AIC
    CompareModels,
    /// Simulate one policy over a synthetic population
    Simulate,
    /// Simulate several policies over the same population
    ComparePolicies,
    /// Time-on-task, productivity, practice allocation and knowledge
    Metrics,
    /// Consolidate the results found in a run directory
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Curves => "curves",
            Command::FitAfm => "fit-afm",
            Command::FitBkt => "fit-bkt",
            Command::CompareModels => "compare-models",
            Command::Simulate => "simulate",
            Command::ComparePolicies => "compare-policies",
            Command::Metrics => "metrics",
            Command::Report => "report",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 success, 1 usage error, 2 data error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command, &cli.settings) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}\n\nFor more information, try '--help'."),
                CliError::Data(m) => eprintln!("error: {m}"),
            }
            e.exit_code()
        }
    }
}

struct Ctx {
    command: Command,
    settings: Settings,
    eff: Effective,
    out_dir: PathBuf,
    jobs: usize,
    inputs: Vec<InputFile>,
}

impl Ctx {
    fn new(command: Command, flags: &Settings) -> Result<Self, CliError> {
        let settings = match &flags.config {
            Some(p) => flags.overlay(&Settings::load_file(p).map_err(CliError::Usage)?),
            None => flags.clone(),
        };
        let eff = Effective::resolve(&settings).map_err(CliError::Usage)?;
        Ok(Self {
            command,
            out_dir: settings.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            jobs: settings.jobs.unwrap_or(0),
            settings,
            eff,
            inputs: Vec::new(),
        })
    }

    fn register(&mut self, role: &str, path: &Path) -> Result<PathBuf, CliError> {
        let sha256 = file_sha256(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputFile { role: role.into(), path: path.display().to_string(), sha256 });
        Ok(path.into())
    }

    fn require(&mut self, role: &str, path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
        match path {
            Some(p) => self.register(role, &p),
            None => Err(CliError::Usage(format!("{} requires {flag}", self.command.name()))),
        }
    }

    fn optional(&mut self, role: &str, path: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        path.map(|p| self.register(role, &p)).transpose()
    }

    /// Hash of the command, effective settings and input contents.
    fn config_hash(&self) -> String {
        let inputs: Vec<_> = self.inputs.iter().map(|i| json!({"role": i.role, "sha256": i.sha256})).collect();
        let doc = json!({ "command": self.command.name(), "settings": self.eff, "inputs": inputs });
        crate::output::sha256_hex(doc.to_string().as_bytes())
    }

    fn output(&self) -> Result<RunOutput, CliError> {
        RunOutput::create(&self.out_dir, self.config_hash())
            .map_err(|e| CliError::Data(format!("{}: {e}", self.out_dir.display())))
    }

    fn finish(self, out: RunOutput) -> Result<String, CliError> {
        let hash = out.config_hash().to_string();
        let config = serde_json::to_value(&self.eff).map_err(data)?;
        let path = out.finish(self.command.name(), self.eff.seed, config, self.inputs).map_err(data)?;
        Ok(format!("{}: config_hash {hash}; manifest {}", self.command.name(), path.display()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build().map_err(data)
    }
}

fn execute(command: Command, flags: &Settings) -> Result<String, CliError> {
    let mut ctx = Ctx::new(command, flags)?;
    let out = match command {
        Command::Ingest => ingest(&mut ctx)?,
        Command::Curves => curves(&mut ctx)?,
        Command::FitAfm => fit_afm_cmd(&mut ctx)?,
        Command::FitBkt => fit_bkt_cmd(&mut ctx)?,
        Command::CompareModels => compare_models(&mut ctx)?,
        Command::Simulate => simulate(&mut ctx)?,
        Command::ComparePolicies => compare_policies(&mut ctx)?,
        Command::Metrics => metrics(&mut ctx)?,
        Command::Report => return report::run_report(&ctx.out_dir, ctx.eff.seed),
    };
    ctx.finish(out)
}

fn load_log(ctx: &Ctx, path: &Path) -> Result<Ingested, CliError> {
    ingest_transactions(path, &ctx.eff.columns, &ctx.eff.ingest)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<KcModel, CliError> {
    formats::read_kc_model(path).map_err(data)
}

fn rollup(txs: &[Transaction], model: &KcModel) -> Result<StudentStepTable, CliError> {
    rollup_student_steps(txs, model).map(|(t, _)| t).map_err(data)
}

/// Log + KC model -> student-step table.
fn load_table(ctx: &mut Ctx) -> Result<(Vec<Transaction>, StudentStepTable), CliError> {
    let input = ctx.require("input", ctx.settings.input.clone(), "--input")?;
    let model_path = ctx.require("kc_model", ctx.settings.kc_model.clone(), "--kc-model")?;
    let txs = load_log(ctx, &input)?.transactions;
    let model = load_model(&model_path)?;
    let table = rollup(&txs, &model)?;
    Ok((txs, table))
}

/// Fits AFM; running out of iterations is reported and the best fit kept.
fn fit_or_warn(table: &StudentStepTable, ctx: &Ctx) -> Result<AfmFit, CliError> {
    let cfg = redesign_core::AfmConfig { with_condition: false, ..ctx.eff.afm.clone() };
    match fit_afm(table, &cfg) {
        Ok(f) => Ok(f),
        Err(AfmError::NonConvergence(f)) => {
            eprintln!("warning: AFM {}", AfmError::NonConvergence(f.clone()));
            Ok(*f)
        }
        Err(e) => Err(data(e)),
    }
}

fn ingest(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let input = ctx.require("input", ctx.settings.input.clone(), "--input")?;
    let model_path = ctx.optional("kc_model", ctx.settings.kc_model.clone())?;
    let ingested = load_log(ctx, &input)?;
    let txs = &ingested.transactions;
    let students: BTreeSet<&str> = txs.iter().map(|t| t.student_id.as_str()).collect();
    let sessions: BTreeSet<(&str, &str)> = txs.iter().map(|t| (t.student_id.as_str(), t.session_id.as_str())).collect();
    let mut diagnostics = json!({
        "ingest": ingested.diagnostics,
        "students": students.len(),
        "sessions": sessions.len(),
    });
    if let Some(p) = model_path {
        let model = load_model(&p)?;
        let (_, rollup) = rollup_student_steps(txs, &model).map_err(data)?;
        diagnostics["rollup"] = serde_json::to_value(rollup).map_err(data)?;
    }
    let mut out = ctx.output()?;
    let mut buf = format!("# config_hash={}\n", out.config_hash()).into_bytes();
    write_transactions(&mut buf, txs).map_err(data)?;
    out.raw("transactions.tsv", &buf).map_err(data)?;
    out.json("ingest_diagnostics.json", "diagnostics", &diagnostics).map_err(data)?;
    Ok(out)
}

fn curves(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let (_, table) = load_table(ctx)?;
    let fit = fit_or_warn(&table, ctx)?;
    let curves = all_curves(&table, Some(&fit), ctx.eff.min_n).map_err(data)?;
    let flags = flag_kcs(&curves, &fit.gamma, &ctx.eff.flags);

    let mut out = ctx.output()?;
    let rows = curves.iter().flat_map(|(kc, pts)| {
        pts.iter().map(move |p| {
            vec![kc.clone(), p.opportunity.to_string(), p.n_students.to_string(), num(p.error_rate), opt_num(p.predicted_error)]
        })
    });
    out.csv("curves.csv", &["kc", "opportunity", "n", "error_rate", "predicted_error"], rows).map_err(data)?;
    let flag_rows = flags.iter().map(|(kc, f)| {
        let flag = serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        vec![kc.clone(), flag, num(fit.gamma.get(kc).copied().unwrap_or(0.0)), curves[kc].len().to_string()]
    });
    out.csv("kc_flags.csv", &["kc", "flag", "gamma", "points"], flag_rows).map_err(data)?;
    let flag_map: BTreeMap<&String, _> = flags.iter().map(|(k, f)| (k, f)).collect();
    out.json("curves.json", "curves", &json!({ "min_n": ctx.eff.min_n, "points": curves, "flags": flag_map }))
        .map_err(data)?;
    for (kc, pts) in &curves {
        let svg = curve_svg(kc, pts, out.config_hash());
        out.raw(&format!("plots/curve_{}.svg", file_label(kc)), svg.as_bytes()).map_err(data)?;
    }
    Ok(out)
}

fn knowledge_rows(by_condition: &[(String, KnowledgeEstimate)]) -> Vec<Vec<String>> {
    by_condition
        .iter()
        .map(|(c, e)| {
            vec![e.student.clone(), c.clone(), num(e.total), num(e.average), e.mastered_count.to_string()]
        })
        .collect()
}

const KNOWLEDGE_HEADER: [&str; 5] = ["student", "condition", "total", "average", "mastered_count"];

/// Condition groups of a table; untagged data forms one group `all`.
fn condition_groups(table: &StudentStepTable) -> Vec<(String, StudentStepTable)> {
    let conditions = table.conditions();
    if conditions.is_empty() {
        vec![("all".into(), table.clone())]
    } else {
        conditions.into_iter().map(|c| {
            let t = table.filter_condition(&c);
            (c, t)
        }).collect()
    }
}

fn afm_knowledge(fit: &AfmFit, table: &StudentStepTable, mastery: f64) -> Result<Vec<(String, KnowledgeEstimate)>, CliError> {
    let mut out = Vec::new();
    for (c, t) in condition_groups(table) {
        for e in knowledge_estimates(fit, &t, mastery).map_err(data)? {
            out.push((c.clone(), e));
        }
    }
    Ok(out)
}

fn bkt_knowledge(
    params: &BTreeMap<String, BktParams>,
    table: &StudentStepTable,
    mastery: f64,
) -> Result<Vec<(String, KnowledgeEstimate)>, CliError> {
    let mut out = Vec::new();
    for (c, t) in condition_groups(table) {
        for e in bkt_knowledge_estimates(params, &t, mastery).map_err(data)? {
            out.push((c.clone(), e));
        }
    }
    Ok(out)
}

fn fit_afm_cmd(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let (_, table) = load_table(ctx)?;
    let (fit, effect) = if ctx.eff.afm.with_condition {
        let eff = afm_condition_effect(&table, &ctx.eff.afm).map_err(data)?;
        let summary = json!({ "treatment": eff.treatment, "delta": eff.delta, "std_error_approx": eff.std_error_approx });
        (eff.fit, Some(summary))
    } else {
        (fit_or_warn(&table, ctx)?, None)
    };
    let knowledge = afm_knowledge(&fit, &table, ctx.eff.mastery_threshold)?;

    let mut out = ctx.output()?;
    out.json("afm_fit.json", "afm", &json!({ "fit": fit, "condition_effect": effect })).map_err(data)?;
    let mut rows = Vec::with_capacity(table.len());
    for r in table.records() {
        let kcs: Vec<&str> = r.kcs.iter().map(String::as_str).collect();
        let opps: Vec<String> = r.opportunity.values().map(u32::to_string).collect();
        rows.push(vec![
            r.student_id.clone(),
            r.problem_id.clone(),
            r.step_id.clone(),
            kcs.join(";"),
            opps.join(";"),
            r.condition_tag.clone().unwrap_or_default(),
            u8::from(r.is_correct()).to_string(),
            num(fit.predict_record(r).map_err(data)?),
        ]);
    }
    out.csv(
        "predictions.csv",
        &["student", "problem", "step", "kcs", "opportunities", "condition", "correct", "predicted"],
        rows,
    )
    .map_err(data)?;
    out.csv("knowledge_afm.csv", &KNOWLEDGE_HEADER, knowledge_rows(&knowledge)).map_err(data)?;
    Ok(out)
}

/// Loads `--bkt-params` when given, otherwise fits every KC in parallel.
fn bkt_params_for(ctx: &mut Ctx, table: &StudentStepTable) -> Result<(BTreeMap<String, BktParams>, bool), CliError> {
    if let Some(p) = ctx.optional("bkt_params", ctx.settings.bkt_params.clone())? {
        return Ok((formats::read_bkt_params(&p).map_err(data)?, true));
    }
    let cfg = ctx.eff.bkt.clone();
    let kcs: Vec<&String> = table.kcs().iter().collect();
    let fitted = ctx.pool()?.install(|| {
        kcs.par_iter()
            .map(|kc| {
                let seqs: Vec<Vec<Observation>> = kc_sequences(table, kc).into_iter().map(|(_, s)| s).collect();
                fit_bkt(kc, &seqs, &cfg).map(|p| ((*kc).clone(), p))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()
    });
    Ok((fitted.map_err(data)?, false))
}

fn fit_bkt_cmd(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let (_, table) = load_table(ctx)?;
    let (params, loaded) = bkt_params_for(ctx, &table)?;
    let knowledge = bkt_knowledge(&params, &table, ctx.eff.mastery_threshold)?;
    let mut out = ctx.output()?;
    out.json("bkt_params.json", "params", &params_to_entries(&params)).map_err(data)?;
    if loaded {
        out.text("bkt_params.txt", "parameters loaded from --bkt-params, not fitted\n").map_err(data)?;
    }
    out.csv("knowledge_bkt.csv", &KNOWLEDGE_HEADER, knowledge_rows(&knowledge)).map_err(data)?;
    Ok(out)
}

fn compare_models(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let input = ctx.require("input", ctx.settings.input.clone(), "--input")?;
    let base_path = ctx.require("kc_model", ctx.settings.kc_model.clone(), "--kc-model")?;
    let base = load_model(&base_path)?;
    let mut candidates = vec![base.clone()];
    for (i, p) in ctx.settings.candidates.clone().unwrap_or_default().into_iter().enumerate() {
        let p = ctx.register(&format!("candidate_{i}"), &p)?;
        candidates.push(load_model(&p)?);
    }
    if let Some(rule_path) = ctx.optional("split_rule", ctx.settings.split_rule.clone())? {
        let Some(target) = ctx.eff.target_kc.clone() else {
            return Err(CliError::Usage("--split-rule requires --target-kc".into()));
        };
        let rule = formats::read_split_rule(&rule_path, &target).map_err(data)?;
        let split = base.split_kc(&rule).map_err(data)?;
        candidates.push(split.renamed(format!("{}-split", base.name())));
    }
    if let Some(labels) = ctx.eff.merge_kcs.clone() {
        let set: BTreeSet<String> = labels.iter().cloned().collect();
        let merged = base.merge_kcs(&set, &labels.join("_")).map_err(data)?;
        candidates.push(merged.renamed(format!("{}-merged", base.name())));
    }
    if candidates.len() < 2 {
        return Err(CliError::Usage(
            "compare-models needs a second model: --candidate, --split-rule or --merge-kcs".into(),
        ));
    }
    let names: BTreeSet<&str> = candidates.iter().map(KcModel::name).collect();
    if names.len() != candidates.len() {
        return Err(CliError::Usage("candidate KC models must have distinct file names".into()));
    }
    let txs = load_log(ctx, &input)?.transactions;
    let cfg = redesign_core::AfmConfig { with_condition: false, ..ctx.eff.afm.clone() };
    let results: Vec<_> = ctx.pool()?.install(|| {
        candidates.par_iter().map(|m| (m.name().to_string(), evaluate_candidate(&txs, m, &cfg))).collect()
    });
    let comparison = rank_candidates(results);

    let mut out = ctx.output()?;
    out.json("model_comparison.json", "comparison", &comparison).map_err(data)?;
    let mut table = format!(
        "{:<28} {:>8} {:>14} {:>14} {:>14} {:>10}\n",
        "model", "params", "log_lik", "AIC", "BIC", "dAIC"
    );
    for r in &comparison.ranking {
        table.push_str(&format!(
            "{:<28} {:>8} {:>14.3} {:>14.3} {:>14.3} {:>10.3}\n",
            r.name, r.n_params, r.log_lik, r.aic, r.bic, r.delta_aic
        ));
    }
    for x in &comparison.excluded {
        table.push_str(&format!("excluded {}: {}\n", x.name, x.reason));
    }
    out.text("model_comparison.txt", &table).map_err(data)?;
    Ok(out)
}

struct SimInputs {
    pool: redesign_core::ProblemPool,
    tracker: BTreeMap<String, BktParams>,
    truth: BTreeMap<String, BktParams>,
}

fn sim_inputs(ctx: &mut Ctx) -> Result<SimInputs, CliError> {
    let pool_path = ctx.require("pool", ctx.settings.pool.clone(), "--pool")?;
    let tracker_path = ctx.require("bkt_params", ctx.settings.bkt_params.clone(), "--bkt-params")?;
    let truth_path = ctx.optional("truth_params", ctx.settings.truth_params.clone())?;
    let pool = formats::read_pool(&pool_path).map_err(data)?;
    let tracker = formats::read_bkt_params(&tracker_path).map_err(data)?;
    let truth = match truth_path {
        Some(p) => formats::read_bkt_params(&p).map_err(data)?,
        None => tracker.clone(),
    };
    if ctx.eff.students == 0 {
        return Err(CliError::Usage("--students must be at least 1".into()));
    }
    Ok(SimInputs { pool, tracker, truth })
}

fn run_config(ctx: &Ctx, inputs: &SimInputs, config: &PolicyConfig) -> Result<Vec<SimReport>, CliError> {
    let population = bkt_population(&inputs.truth, ctx.eff.students);
    let reports = ctx.pool()?.install(|| {
        population
            .par_iter()
            .map(|s| simulate_practice(&inputs.pool, s, &inputs.tracker, config))
            .collect::<Result<Vec<_>, _>>()
    });
    reports.map_err(data)
}

fn simulate(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let inputs = sim_inputs(ctx)?;
    let config = ctx.eff.policy.clone();
    let reports = run_config(ctx, &inputs, &config)?;
    let summary = aggregate_reports(&config, &reports);

    let mut out = ctx.output()?;
    out.json("sim_reports.json", "reports", &reports).map_err(data)?;
    out.json("sim_summary.json", "summary", &summary).map_err(data)?;
    let rows = reports.iter().flat_map(|r| {
        r.per_kc.iter().map(move |(kc, k)| {
            vec![
                r.student.clone(),
                kc.clone(),
                k.opportunities.to_string(),
                k.opportunities_after_overpractice_threshold.to_string(),
                num(k.final_mastery_estimate),
                k.underpracticed.to_string(),
            ]
        })
    });
    out.csv(
        "sim_kc.csv",
        &["student", "kc", "opportunities", "opportunities_after_overpractice", "final_mastery", "underpracticed"],
        rows,
    )
    .map_err(data)?;
    Ok(out)
}

/// Original tutor against the redesign: fixed order without skipping, then
/// adaptive selection with skipping.
fn default_policies(base: &PolicyConfig) -> Vec<PolicyConfig> {
    vec![
        PolicyConfig { selection: Selection::FixedSequence, skip_enabled: false, ..base.clone() },
        PolicyConfig { selection: Selection::Adaptive, skip_enabled: true, ..base.clone() },
    ]
}

fn compare_policies(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let inputs = sim_inputs(ctx)?;
    let configs = ctx.eff.policies.clone().unwrap_or_else(|| default_policies(&ctx.eff.policy));
    let runs = configs.iter().map(|c| run_config(ctx, &inputs, c)).collect::<Result<Vec<_>, _>>()?;
    let comparison = summarize_policies(&configs, &runs);

    let mut out = ctx.output()?;
    out.json("policy_comparison.json", "comparison", &comparison).map_err(data)?;
    let mut rows = Vec::new();
    for (i, a) in comparison.aggregates.iter().enumerate() {
        let label = policy_label(&a.config);
        for (metric, s) in [
            ("skipped_steps", &a.skipped_steps),
            ("completed_steps", &a.completed_steps),
            ("simulated_seconds", &a.simulated_seconds),
            ("opportunities", &a.opportunities),
            ("opportunities_after_overpractice", &a.opportunities_after_overpractice_threshold),
            ("mastered_kcs", &a.mastered_kcs),
        ] {
            rows.push(vec![i.to_string(), label.clone(), metric.into(), num(s.mean), opt_num(s.sd)]);
        }
    }
    out.csv("policy_comparison.csv", &["config", "policy", "metric", "mean", "sd"], rows).map_err(data)?;
    Ok(out)
}

pub fn policy_label(c: &PolicyConfig) -> String {
    let sel = match c.selection {
        Selection::Adaptive => "adaptive",
        Selection::FixedSequence => "fixed",
    };
    format!("{sel}{}", if c.skip_enabled { "+skip" } else { "" })
}

fn metrics(ctx: &mut Ctx) -> Result<RunOutput, CliError> {
    let (txs, table) = load_table(ctx)?;
    let new_kcs = match ctx.optional("new_kcs", ctx.settings.new_kcs.clone())? {
        Some(p) => formats::read_new_kcs(&p).map_err(data)?,
        None => BTreeSet::new(),
    };
    let (params, _) = bkt_params_for(ctx, &table)?;

    let times = time_on_task(&txs, &ctx.eff.time);
    let mut session_condition: BTreeMap<(&str, &str), &str> = BTreeMap::new();
    for t in &txs {
        session_condition
            .entry((t.student_id.as_str(), t.session_id.as_str()))
            .or_insert(t.condition_tag.as_deref().unwrap_or("all"));
    }
    let mut active: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for b in &times {
        let c = session_condition[&(b.student.as_str(), b.session.as_str())];
        *active.entry((c, b.student.as_str())).or_default() += b.active_seconds;
    }
    let mut by_cond: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((c, _), secs) in &active {
        by_cond.entry(c).or_default().push(secs / 60.0);
    }
    let active_minutes: BTreeMap<&str, _> = by_cond.iter().map(|(c, v)| (*c, summarize(v))).collect();

    let prod = productivity(&table);
    let mut prod_by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &prod {
        prod_by.entry(r.condition.clone().unwrap_or_else(|| "all".into())).or_default().push(r.completed_steps as f64);
    }
    let completed_steps: BTreeMap<&String, _> = prod_by.iter().map(|(c, v)| (c, summarize(v))).collect();

    let allocation =
        opportunity_allocation(&table, &new_kcs, &params, ctx.eff.overpractice_threshold).map_err(data)?;
    let mut shares: BTreeMap<String, (u32, u32, u32)> = BTreeMap::new();
    for a in &allocation {
        let e = shares.entry(a.condition.clone().unwrap_or_else(|| "all".into())).or_default();
        e.0 += a.opportunities;
        e.2 += a.opportunities_after_overpractice;
        if a.kc_type == KcType::New {
            e.1 += a.opportunities;
        }
    }
    let allocation_summary: BTreeMap<&String, _> = shares
        .iter()
        .map(|(c, (total, new, over))| {
            let share = |n: u32| if *total == 0 { 0.0 } else { f64::from(n) / f64::from(*total) };
            (c, json!({ "opportunities": total, "new_kc_share": share(*new), "overpractice_share": share(*over) }))
        })
        .collect();

    let fit = fit_or_warn(&table, ctx)?;
    let afm_k = afm_knowledge(&fit, &table, ctx.eff.mastery_threshold)?;
    let bkt_k = bkt_knowledge(&params, &table, ctx.eff.mastery_threshold)?;

    let mut out = ctx.output()?;
    let time_rows = times.iter().map(|b| {
        vec![
            b.student.clone(),
            b.session.clone(),
            session_condition[&(b.student.as_str(), b.session.as_str())].to_string(),
            num(b.logged_in_seconds),
            num(b.idle_seconds),
            num(b.active_seconds),
        ]
    });
    out.csv("time_on_task.csv", &["student", "session", "condition", "logged_in_seconds", "idle_seconds", "active_seconds"], time_rows)
        .map_err(data)?;
    let prod_rows = prod.iter().map(|r| {
        vec![
            r.student.clone(),
            r.condition.clone().unwrap_or_default(),
            r.unit.clone().unwrap_or_default(),
            r.completed_steps.to_string(),
        ]
    });
    out.csv("productivity.csv", &["student", "condition", "unit", "completed_steps"], prod_rows).map_err(data)?;
    let alloc_rows = allocation.iter().map(|a| {
        vec![
            a.condition.clone().unwrap_or_default(),
            a.kc.clone(),
            if a.kc_type == KcType::New { "NEW" } else { "ESTABLISHED" }.into(),
            a.opportunities.to_string(),
            a.opportunities_after_overpractice.to_string(),
        ]
    });
    out.csv("allocation.csv", &["condition", "kc", "kc_type", "opportunities", "opportunities_after_overpractice"], alloc_rows)
        .map_err(data)?;
    out.csv("metrics_knowledge_afm.csv", &KNOWLEDGE_HEADER, knowledge_rows(&afm_k)).map_err(data)?;
    out.csv("metrics_knowledge_bkt.csv", &KNOWLEDGE_HEADER, knowledge_rows(&bkt_k)).map_err(data)?;
    out.json(
        "metrics.json",
        "metrics",
        &json!({
            "sd_convention": "sample (n-1)",
            "idle_threshold_seconds": ctx.eff.time.idle_threshold_seconds,
            "overpractice_threshold": ctx.eff.overpractice_threshold,
            "mastery_threshold": ctx.eff.mastery_threshold,
            "active_minutes": active_minutes,
            "completed_steps": completed_steps,
            "allocation": allocation_summary,
            "knowledge_afm": knowledge_summary(&afm_k),
            "knowledge_bkt": knowledge_summary(&bkt_k),
        }),
    )
    .map_err(data)?;
    Ok(out)
}
