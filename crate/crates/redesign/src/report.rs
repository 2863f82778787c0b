//! `report`: one consolidated JSON document and a plain-text summary built
//! from whatever results a run directory holds.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::cli::CliError;
use crate::output::{sha256_hex, InputFile, RunOutput};

/// (section, file, key holding the body)
const SOURCES: [(&str, &str, &str); 8] = [
    ("ingest", "ingest_diagnostics.json", "diagnostics"),
    ("curves", "curves.json", "curves"),
    ("afm", "afm_fit.json", "afm"),
    ("bkt", "bkt_params.json", "params"),
    ("model_comparison", "model_comparison.json", "comparison"),
    ("simulation", "sim_summary.json", "summary"),
    ("policies", "policy_comparison.json", "comparison"),
    ("metrics", "metrics.json", "metrics"),
];

const SIM_METRICS: [&str; 6] = [
    "skipped_steps",
    "completed_steps",
    "simulated_seconds",
    "opportunities",
    "opportunities_after_overpractice_threshold",
    "mastered_kcs",
];

fn mean_sd(v: &Value) -> Value {
    json!({ "mean": v["mean"], "sd": v["sd"] })
}

fn policy_label(config: &Value) -> String {
    let sel = if config["selection"] == "ADAPTIVE" { "adaptive" } else { "fixed" };
    let skip = if config["skip_enabled"] == true { "+skip" } else { "" };
    format!("{sel}{skip}")
}

fn aggregate(a: &Value) -> Value {
    let mut m = Map::new();
    m.insert("policy".into(), policy_label(&a["config"]).into());
    for k in SIM_METRICS {
        m.insert(k.into(), mean_sd(&a[k]));
    }
    Value::Object(m)
}

fn summarize_section(section: &str, body: &Value) -> Value {
    match section {
        "curves" => {
            let mut m = Map::new();
            if let Some(points) = body["points"].as_object() {
                for (kc, pts) in points {
                    let pts = pts.as_array().cloned().unwrap_or_default();
                    m.insert(
                        kc.clone(),
                        json!({
                            "points": pts.len(),
                            "first_error_rate": pts.first().map(|p| p["error_rate"].clone()),
                            "last_error_rate": pts.last().map(|p| p["error_rate"].clone()),
                            "flag": body["flags"][kc],
                        }),
                    );
                }
            }
            json!({ "min_n": body["min_n"], "kcs": m })
        }
        "afm" => {
            let f = &body["fit"];
            json!({
                "kc_model": f["kc_model_name"],
                "n_obs": f["n_obs"],
                "n_params": f["n_params"],
                "log_lik": f["log_lik"],
                "aic": f["aic"],
                "bic": f["bic"],
                "converged": f["converged"],
                "iterations": f["iterations"],
                "beta": f["beta"],
                "gamma": f["gamma"],
                "degenerate_kcs": f["degenerate_kcs"],
                "condition_effect": body["condition_effect"],
            })
        }
        "model_comparison" => {
            let ranking: Vec<Value> = body["ranking"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|r| {
                    json!({
                        "name": r["name"], "n_params": r["n_params"], "log_lik": r["log_lik"],
                        "aic": r["aic"], "bic": r["bic"], "delta_aic": r["delta_aic"],
                    })
                })
                .collect();
            json!({ "ranking": ranking, "excluded": body["excluded"] })
        }
        "simulation" => aggregate(body),
        "policies" => {
            let aggregates: Vec<Value> = body["aggregates"].as_array().into_iter().flatten().map(aggregate).collect();
            let paired: Vec<Value> = body["paired_vs_first"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|p| {
                    let mut m = Map::new();
                    m.insert("config_index".into(), p["config_index"].clone());
                    for k in SIM_METRICS {
                        m.insert(k.into(), mean_sd(&p[k]));
                    }
                    Value::Object(m)
                })
                .collect();
            json!({ "students": body["students"], "aggregates": aggregates, "paired_vs_first": paired })
        }
        _ => body.clone(),
    }
}

fn fmt_num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if v.is_f64() => format!("{x:.4}"),
        Some(_) => v.to_string(),
        None => "-".into(),
    }
}

fn text_summary(sections: &Map<String, Value>) -> String {
    let mut s = String::new();
    if let Some(i) = sections.get("ingest") {
        let _ = writeln!(
            s,
            "\n[ingest]\n  rows {}  transactions {}  dropped {}  students {}  sessions {}",
            i["ingest"]["data_rows"], i["ingest"]["transactions"], i["ingest"]["dropped_rows"], i["students"], i["sessions"]
        );
        if let Some(r) = i.get("rollup") {
            let _ = writeln!(s, "  step instances {}  unmapped {}", r["step_instances"], r["unmapped_instances"]);
        }
    }
    if let Some(a) = sections.get("afm") {
        let _ = writeln!(
            s,
            "\n[afm] model {}  obs {}  params {}\n  log_lik {}  AIC {}  BIC {}  converged {}",
            a["kc_model"], a["n_obs"], a["n_params"], fmt_num(&a["log_lik"]), fmt_num(&a["aic"]), fmt_num(&a["bic"]), a["converged"]
        );
        if let Some(beta) = a["beta"].as_object() {
            for (kc, b) in beta {
                let _ = writeln!(s, "  {kc:<16} beta {:>9}  gamma {:>9}", fmt_num(b), fmt_num(&a["gamma"][kc]));
            }
        }
        let c = &a["condition_effect"];
        if !c.is_null() {
            let _ = writeln!(s, "  condition effect ({}): delta {} (SE {})", c["treatment"], fmt_num(&c["delta"]), fmt_num(&c["std_error_approx"]));
        }
    }
    if let Some(c) = sections.get("curves") {
        let _ = writeln!(s, "\n[curves] min_n {}", c["min_n"]);
        if let Some(kcs) = c["kcs"].as_object() {
            for (kc, v) in kcs {
                let _ = writeln!(
                    s,
                    "  {kc:<16} points {:>3}  first {:>7}  last {:>7}  {}",
                    v["points"],
                    fmt_num(&v["first_error_rate"]),
                    fmt_num(&v["last_error_rate"]),
                    v["flag"].as_str().unwrap_or("-")
                );
            }
        }
    }
    if let Some(b) = sections.get("bkt").and_then(Value::as_object) {
        let _ = writeln!(s, "\n[bkt]");
        for (kc, p) in b {
            let _ = writeln!(
                s,
                "  {kc:<16} L0 {}  T {}  G {}  S {}",
                fmt_num(&p["p_init"]),
                fmt_num(&p["p_learn"]),
                fmt_num(&p["p_guess"]),
                fmt_num(&p["p_slip"])
            );
        }
    }
    if let Some(m) = sections.get("model_comparison") {
        let _ = writeln!(s, "\n[model comparison] ascending AIC");
        for r in m["ranking"].as_array().into_iter().flatten() {
            let _ = writeln!(
                s,
                "  {:<28} params {:>5}  AIC {:>12}  dAIC {:>10}",
                r["name"].as_str().unwrap_or("-"),
                r["n_params"],
                fmt_num(&r["aic"]),
                fmt_num(&r["delta_aic"])
            );
        }
    }
    let sim_line = |s: &mut String, a: &Value| {
        let _ = writeln!(
            s,
            "  {:<14} completed {:>9}  skipped {:>9}  overpractice {:>9}  mastered KCs {:>7}",
            a["policy"].as_str().unwrap_or("-"),
            fmt_num(&a["completed_steps"]["mean"]),
            fmt_num(&a["skipped_steps"]["mean"]),
            fmt_num(&a["opportunities_after_overpractice_threshold"]["mean"]),
            fmt_num(&a["mastered_kcs"]["mean"])
        );
    };
    if let Some(a) = sections.get("simulation") {
        let _ = writeln!(s, "\n[simulation] means per student");
        sim_line(&mut s, a);
    }
    if let Some(p) = sections.get("policies") {
        let _ = writeln!(s, "\n[policies] {} students; means per student", p["students"]);
        for a in p["aggregates"].as_array().into_iter().flatten() {
            sim_line(&mut s, a);
        }
    }
    if let Some(m) = sections.get("metrics") {
        let _ = writeln!(s, "\n[metrics] SD convention: {}", m["sd_convention"].as_str().unwrap_or("-"));
        if let Some(conds) = m["active_minutes"].as_object() {
            for (c, v) in conds {
                let steps = &m["completed_steps"][c];
                let alloc = &m["allocation"][c];
                let _ = writeln!(
                    s,
                    "  {c:<14} active min {:>9}  completed steps {:>9}  new-KC share {:>7}  overpractice share {:>7}",
                    fmt_num(&v["mean"]),
                    fmt_num(&steps["mean"]),
                    fmt_num(&alloc["new_kc_share"]),
                    fmt_num(&alloc["overpractice_share"])
                );
            }
        }
        for model in ["knowledge_afm", "knowledge_bkt"] {
            for c in m[model]["conditions"].as_array().into_iter().flatten() {
                let _ = writeln!(
                    s,
                    "  {model} {:<14} total {:>8} (SD {:>8})  mastered {:>8}",
                    c["condition"].as_str().unwrap_or("-"),
                    fmt_num(&c["total"]["mean"]),
                    fmt_num(&c["total"]["sd"]),
                    fmt_num(&c["mastered_count"]["mean"])
                );
            }
        }
    }
    s
}

/// Reads the run directory, writes `report.json` and `report.txt`.
pub fn run_report(dir: &Path, seed: u64) -> Result<String, CliError> {
    let mut inputs = Vec::new();
    let mut sections = Map::new();
    let mut sources = Map::new();
    for (section, file, key) in SOURCES {
        let path = dir.join(file);
        let Ok(bytes) = fs::read(&path) else { continue };
        let doc: Value =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        inputs.push(InputFile { role: section.into(), path: file.into(), sha256: sha256_hex(&bytes) });
        sources.insert(file.into(), doc["config_hash"].clone());
        sections.insert(section.into(), summarize_section(section, &doc[key]));
    }
    if sections.is_empty() {
        return Err(CliError::Data(format!("no results found in {}", dir.display())));
    }
    let hashed: Vec<Value> = inputs.iter().map(|i| json!({ "role": i.role, "sha256": i.sha256 })).collect();
    let hash = sha256_hex(json!({ "command": "report", "inputs": hashed }).to_string().as_bytes());

    let mut out = RunOutput::create(dir, hash.clone()).map_err(|e| CliError::Data(e.to_string()))?;
    let data = |e: std::io::Error| CliError::Data(e.to_string());
    let body = json!({ "sources": sources, "sections": sections });
    out.json("report.json", "report", &body).map_err(data)?;
    out.text("report.txt", &text_summary(&sections)).map_err(data)?;
    let path = out.finish("report", seed, json!({}), inputs).map_err(data)?;
    Ok(format!("report: config_hash {hash}; manifest {}", path.display()))
}
