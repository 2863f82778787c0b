//! The bundled demonstration data set: a 20-student crossover study drawn
//! from known AFM parameters, with every auxiliary file the commands take.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use redesign_core::policysim::{PoolStep, Problem, ProblemPool};
use redesign_core::synth::{afm_log, kc_label, AfmSynthConfig};
use redesign_core::BktParams;

use crate::formats::{params_to_entries, write_kc_model, write_pool};
use crate::ingest::write_transactions;

pub const STUDENTS: usize = 20;
pub const OPPORTUNITIES: usize = 12;
pub const SEED: u64 = 20_100_909;
pub const MERGED: [&str; 2] = ["KC00", "KC01"];
pub const SPLIT_TARGET: &str = "KC02";
pub const NEW_KC: &str = "KC03";

pub fn synth_config() -> AfmSynthConfig {
    let beta = vec![1.2, 0.9, -0.6, -1.2];
    let gamma = vec![0.05, 0.08, 0.25, 0.3];
    AfmSynthConfig {
        delta: 0.4,
        conditions: Some(("original".into(), "redesigned".into())),
        unit: Some("Unit 1".into()),
        sessions_per_student: 2,
        idle_every: Some(9),
        idle_gap_seconds: 400.0,
        hint_fraction: 0.3,
        ..AfmSynthConfig::with_kcs(STUDENTS, OPPORTUNITIES, beta, gamma, SEED)
    }
}

fn tracker_params() -> BTreeMap<String, BktParams> {
    [(0.6, 0.3, 0.2, 0.1), (0.5, 0.25, 0.2, 0.1), (0.2, 0.15, 0.15, 0.1), (0.1, 0.12, 0.15, 0.1)]
        .into_iter()
        .enumerate()
        .map(|(k, (l0, t, g, s))| (kc_label(k), BktParams::new(kc_label(k), l0, t, g, s)))
        .collect()
}

fn pool() -> ProblemPool {
    let problems = (0..OPPORTUNITIES)
        .map(|j| Problem {
            problem_id: format!("P{j:03}"),
            steps: (0..4)
                .map(|k| PoolStep { step_id: format!("S{k:02}"), kcs: BTreeSet::from([kc_label(k)]) })
                .collect(),
            est_step_seconds: 20.0,
        })
        .collect();
    ProblemPool::new(problems).expect("non-empty pool")
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(io::Error::other)?;
    Ok(buf)
}

/// File name and contents of every fixture file.
pub fn files() -> io::Result<Vec<(&'static str, Vec<u8>)>> {
    let log = afm_log(&synth_config());
    let model = log.model.renamed("kc_model");
    let merged = model
        .merge_kcs(&MERGED.iter().map(|s| s.to_string()).collect(), &MERGED.join("_"))
        .map_err(io::Error::other)?;

    let mut split = b"problem,step,new_kc\n".to_vec();
    for (p, s, k) in model.rows() {
        if k == SPLIT_TARGET {
            let n: usize = p[1..].parse().map_err(io::Error::other)?;
            let half = if n < OPPORTUNITIES / 2 { "early" } else { "late" };
            split.extend(format!("{p},{s},{SPLIT_TARGET}-{half}\n").bytes());
        }
    }
    let params = serde_json::json!({ "params": params_to_entries(&tracker_params()) });
    let mut params = serde_json::to_vec_pretty(&params).map_err(io::Error::other)?;
    params.push(b'\n');

    Ok(vec![
        ("log.tsv", csv_bytes(|b| write_transactions(b, &log.transactions))?),
        ("kc_model.csv", csv_bytes(|b| write_kc_model(b, &model))?),
        ("kc_model_merged.csv", csv_bytes(|b| write_kc_model(b, &merged))?),
        ("split_rule.csv", split),
        ("pool.csv", csv_bytes(|b| write_pool(b, &pool()))?),
        ("new_kcs.txt", format!("# KCs introduced by the redesign\n{NEW_KC}\n").into_bytes()),
        ("tracker_params.json", params),
        ("run.toml", RUN_TOML.as_bytes().to_vec()),
    ])
}

const RUN_TOML: &str = r#"seed = 7
students = 40
min_n = 5
target_kc = "KC02"

[[policies]]
selection = "FIXED_SEQUENCE"
skip_enabled = false

[[policies]]
selection = "ADAPTIVE"
skip_enabled = true
"#;

pub fn write(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files()? {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
