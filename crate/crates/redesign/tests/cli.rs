mod common;

use std::fs;

use common::{fixtures, redesign, run_pipeline, snapshot};
use serde_json::Value;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = redesign(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_required_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = redesign(&["fit-afm", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--input"));
}

#[test]
fn bad_threshold_is_a_usage_error() {
    let o = redesign(&["ingest", "--mastery-threshold", "0.5", "--overpractice-threshold", "0.8"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_log_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("bad.tsv");
    fs::write(
        &log,
        "Anon Student Id\tSession Id\tTime\tProblem Name\tStep Name\tAttempt At Step\tOutcome\n\
         s1\tx\tnot-a-time\tP\tS\t1\tCORRECT\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = redesign(&["ingest", "--input", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = redesign(&["ingest", "--input", "/nonexistent/log.tsv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_without_results_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = redesign(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(redesign(&["--help"]).status.code(), Some(0));
    let v = redesign(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn bundled_fixture_matches_generator() {
    for (name, bytes) in redesign::fixture::files().unwrap() {
        let on_disk = fs::read(fixtures().join(name)).unwrap();
        assert!(on_disk == bytes, "fixtures/{name} is stale; run `cargo run --example make_fixture`");
    }
}

#[test]
fn pipeline_outputs_are_stamped_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }

    // Every output carries its command's hash, and the manifests list them.
    for entry in fs::read_dir(a.path()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if !name.ends_with(".manifest.json") {
            continue;
        }
        let m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let hash = m["config_hash"].as_str().unwrap();
        assert_eq!(m["seed"], 7);
        for o in m["outputs"].as_array().unwrap() {
            let text = fs::read_to_string(a.path().join(o["path"].as_str().unwrap())).unwrap();
            assert!(text.contains(hash), "{} lacks the hash of {name}", o["path"]);
        }
    }

    let golden = |name: &str| common::golden(name, &sa[name]);
    golden("report.json");
    golden("report.txt");
}

#[test]
fn flags_change_the_hash_and_config_file_wins() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let log = f.join("log.tsv").display().to_string();
    let toml = f.join("run.toml").display().to_string();
    let run = |sub: &str, extra: &[&str]| {
        let out = dir.path().join(sub);
        let out_s = out.display().to_string();
        let mut args = vec!["ingest", "--input", &log, "--out", &out_s];
        args.extend_from_slice(extra);
        assert!(redesign(&args).status.success());
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join("ingest.manifest.json")).unwrap()).unwrap();
        m["config_hash"].as_str().unwrap().to_string()
    };
    let plain = run("a", &[]);
    assert_eq!(plain, run("b", &["--jobs", "1"]));
    assert_ne!(plain, run("c", &["--seed", "3"]));
    assert_eq!(run("d", &["--config", &toml, "--seed", "3"]), run("e", &["--config", &toml]));
}
