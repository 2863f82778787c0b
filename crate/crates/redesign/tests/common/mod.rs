#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn redesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redesign")).args(args).output().expect("binary runs")
}

/// Every command over the bundled fixture, writing into `out`.
pub fn run_pipeline(out: &Path) {
    let f = fixtures();
    let p = |name: &str| f.join(name).display().to_string();
    let out = out.display().to_string();
    let (log, model, pool, params, new_kcs) =
        (p("log.tsv"), p("kc_model.csv"), p("pool.csv"), p("tracker_params.json"), p("new_kcs.txt"));
    let (merged, split, config) = (p("kc_model_merged.csv"), p("split_rule.csv"), p("run.toml"));
    let base = ["--out", out.as_str(), "--config", &config];
    let steps: Vec<Vec<&str>> = vec![
        vec!["ingest", "--input", &log, "--kc-model", &model],
        vec!["curves", "--input", &log, "--kc-model", &model],
        vec!["fit-afm", "--with-condition", "--input", &log, "--kc-model", &model],
        vec!["fit-bkt", "--input", &log, "--kc-model", &model],
        vec![
            "compare-models",
            "--input",
            &log,
            "--kc-model",
            &model,
            "--candidate",
            &merged,
            "--split-rule",
            &split,
        ],
        vec!["simulate", "--pool", &pool, "--bkt-params", &params],
        vec!["compare-policies", "--pool", &pool, "--bkt-params", &params, "--new-kcs", &new_kcs],
        vec!["metrics", "--input", &log, "--kc-model", &model, "--bkt-params", &params, "--new-kcs", &new_kcs],
        vec!["report"],
    ];
    for step in steps {
        let args: Vec<&str> = step.iter().copied().chain(base).collect();
        let o = redesign(&args);
        assert!(o.status.success(), "{:?} failed: {}", step[0], String::from_utf8_lossy(&o.stderr));
    }
}

/// Relative path -> bytes for every file under `dir`; manifests have their
/// `created_at` line removed.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.strip_prefix(dir).unwrap().display().to_string();
            let mut bytes = fs::read(&path).unwrap();
            if name.ends_with(".manifest.json") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text.lines().filter(|l| !l.contains("\"created_at\"")).collect::<Vec<_>>().join("\n").into_bytes();
            }
            files.insert(name, bytes);
        }
    }
    files
}

/// Compares against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &[u8]) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read(&path).unwrap_or_else(|_| panic!("missing {}; run with UPDATE_GOLDEN=1", path.display()));
    assert!(
        expected == actual,
        "{name} differs from the golden copy; rerun with UPDATE_GOLDEN=1 if the change is intended"
    );
}
