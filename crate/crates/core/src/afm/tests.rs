use super::*;
use crate::logstore::{rollup_student_steps, StudentStepTable};
use crate::math::{ln, sigmoid};
use crate::synth::{afm_log, rng_for, AfmSynthConfig};
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use rand::Rng;

fn synthetic_table(cfg: &AfmSynthConfig) -> StudentStepTable {
    let log = afm_log(cfg);
    rollup_student_steps(&log.transactions, &log.model).unwrap().0
}

fn hand_fit(theta: &[(&str, f64)], kcs: &[(&str, f64, f64)]) -> AfmFit {
    AfmFit {
        kc_model_name: "m".into(),
        theta: theta.iter().map(|(s, t)| (s.to_string(), *t)).collect(),
        beta: kcs.iter().map(|(k, b, _)| (k.to_string(), *b)).collect(),
        gamma: kcs.iter().map(|(k, _, g)| (k.to_string(), *g)).collect(),
        delta: None,
        treatment: None,
        log_lik: 0.0,
        n_params: 0,
        n_obs: 0,
        aic: 0.0,
        bic: 0.0,
        converged: true,
        iterations: 0,
        max_gradient: 0.0,
        l2_theta: 0.5,
        degenerate_kcs: vec![],
        gamma_at_bound: vec![],
        objective_trace: vec![],
    }
}

fn prior(entries: &[(&str, u32)]) -> BTreeMap<String, u32> {
    entries.iter().map(|(k, t)| (k.to_string(), *t)).collect()
}

#[test]
fn predict_at_origin_is_half() {
    let fit = hand_fit(&[("a", 0.0)], &[("k", 0.0, 0.0)]);
    assert_eq!(afm_predict(&fit, "a", &prior(&[("k", 0)]), false, false).unwrap(), 0.5);
}

#[test]
fn predict_hand_evaluated_logit() {
    let fit = hand_fit(&[("a", 1.0)], &[("k", -1.0, 0.5)]);
    let p = fit.predict("a", &prior(&[("k", 2)]), false, false).unwrap();
    assert!((p - 0.731_058_578_6).abs() < 1e-9);
}

#[test]
fn predict_adds_kc_logits() {
    let fit = hand_fit(&[("a", 0.0)], &[("k1", -0.5, 0.0), ("k2", -0.5, 0.0)]);
    let p = fit.predict("a", &prior(&[("k1", 0), ("k2", 0)]), false, false).unwrap();
    assert!((p - 0.268_941_421_4).abs() < 1e-9);
}

#[test]
fn predict_unknowns() {
    let fit = hand_fit(&[("a", 0.0)], &[("k", 0.0, 0.0)]);
    assert_eq!(
        fit.predict("zz", &prior(&[("k", 0)]), false, false).unwrap_err(),
        AfmError::UnknownStudent("zz".into())
    );
    assert_eq!(fit.predict("zz", &prior(&[("k", 0)]), false, true).unwrap(), 0.5);
    assert_eq!(fit.predict("a", &prior(&[("q", 0)]), false, false).unwrap_err(), AfmError::UnknownKc("q".into()));
}

#[test]
fn gradient_matches_central_differences() {
    let table = synthetic_table(&AfmSynthConfig::random_kcs(12, 3, 5, 2));
    let data = AfmData::from_table(&table, None).unwrap();
    let problem = AfmProblem::new(data, 0.5);
    let mut rng = rng_for(99, 0);
    for _ in 0..10 {
        let x: Vec<f64> = (0..problem.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = problem.gradient(&x);
        for i in 0..x.len() {
            let h = 1e-5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (problem.objective(&xp) - problem.objective(&xm)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            assert!(rel <= 1e-4, "coord {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn recovers_generating_parameters() {
    let cfg = AfmSynthConfig::random_kcs(150, 5, 15, 21);
    let table = synthetic_table(&cfg);
    let fit = fit_afm(&table, &AfmConfig::default()).unwrap();
    assert!(fit.converged);
    for k in 0..5 {
        let kc = crate::synth::kc_label(k);
        assert!((fit.beta[&kc] - cfg.beta[k]).abs() < 0.35, "beta {kc}");
        assert!((fit.gamma[&kc] - cfg.gamma[k]).abs() < 0.1, "gamma {kc}");
    }
}

#[test]
fn objective_never_decreases() {
    let table = synthetic_table(&AfmSynthConfig::random_kcs(40, 4, 8, 5));
    let fit = fit_afm(&table, &AfmConfig::default()).unwrap();
    assert!(fit.objective_trace.len() >= 2);
    for w in fit.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - FLAT_RELATIVE * w[0].abs().max(1.0));
    }
}

#[test]
fn information_criteria_recompute_exactly() {
    let table = synthetic_table(&AfmSynthConfig::random_kcs(30, 3, 6, 8));
    let fit = fit_afm(&table, &AfmConfig::default()).unwrap();
    assert_eq!(fit.n_params, 30 + 2 * 3);
    assert_eq!(fit.aic, 2.0 * fit.n_params as f64 - 2.0 * fit.log_lik);
    assert_eq!(fit.bic, fit.n_params as f64 * ln(fit.n_obs as f64) - 2.0 * fit.log_lik);
    assert!(fit.gamma.values().all(|&g| g >= 0.0));
}

#[test]
fn penalty_centers_proficiencies() {
    // single-KC steps: shifting theta up and beta down leaves every
    // prediction unchanged, so only the penalty pins the offset
    let table = synthetic_table(&AfmSynthConfig::random_kcs(50, 3, 8, 13));
    let fit = fit_afm(&table, &AfmConfig { tol: 1e-8, ..AfmConfig::default() }).unwrap();
    let sum: f64 = fit.theta.values().sum();
    assert!(sum.abs() < 1e-6, "sum theta = {sum}");
}

#[test]
fn shuffled_records_fit_identically() {
    let table = synthetic_table(&AfmSynthConfig::random_kcs(30, 3, 6, 17));
    let mut records = table.records().to_vec();
    records.reverse();
    let shuffled = StudentStepTable::from_records("m", records);
    let a = fit_afm(&table, &AfmConfig::default()).unwrap();
    let b = fit_afm(&shuffled, &AfmConfig::default()).unwrap();
    for (k, v) in &a.beta {
        assert!((v - b.beta[k]).abs() < 1e-6);
        assert!((a.gamma[k] - b.gamma[k]).abs() < 1e-6);
    }
}

#[test]
fn all_correct_data_stays_finite() {
    let mut cfg = AfmSynthConfig::random_kcs(10, 2, 5, 3);
    cfg.beta = vec![40.0, 40.0];
    let table = synthetic_table(&cfg);
    assert!(table.records().iter().all(|r| r.is_correct()));
    let fit = match fit_afm(&table, &AfmConfig::default()) {
        Ok(f) => f,
        Err(AfmError::NonConvergence(f)) => *f,
        Err(e) => panic!("{e}"),
    };
    assert!(fit.log_lik.is_finite());
    assert!(fit.theta.values().chain(fit.beta.values()).chain(fit.gamma.values()).all(|v| v.is_finite()));
    assert!(fit.gamma.values().all(|&g| g >= 0.0));
}

#[test]
fn sparse_kc_is_degenerate_with_zero_slope() {
    let mut table = synthetic_table(&AfmSynthConfig::random_kcs(20, 2, 5, 4));
    let mut records = table.records().to_vec();
    let mut lonely = records[0].clone();
    lonely.kcs = ["rare".to_string()].into_iter().collect();
    lonely.opportunity = [("rare".to_string(), 1)].into_iter().collect();
    lonely.first_attempt_time += 0.5;
    records.push(lonely);
    table = StudentStepTable::from_records("m", records);
    let fit = fit_afm(&table, &AfmConfig::default()).unwrap();
    assert_eq!(fit.degenerate_kcs, vec!["rare".to_string()]);
    assert_eq!(fit.gamma["rare"], 0.0);
}

#[test]
fn condition_effect_sign_and_errors() {
    let mut cfg = AfmSynthConfig::random_kcs(120, 4, 10, 31);
    cfg.conditions = Some(("original".into(), "redesigned".into()));
    cfg.delta = -0.6;
    let table = synthetic_table(&cfg);
    let eff = afm_condition_effect(&table, &AfmConfig::default()).unwrap();
    assert_eq!(eff.treatment, "redesigned");
    assert!(eff.delta < -0.3 && eff.delta > -0.9, "delta {}", eff.delta);
    assert!(eff.std_error_approx > 0.0 && eff.std_error_approx < 0.2);
    assert_eq!(eff.fit.n_params, 120 + 8 + 1);

    let one = table.filter_condition("original");
    assert!(matches!(afm_condition_effect(&one, &AfmConfig::default()), Err(AfmError::SingleCondition(_))));
}

#[test]
fn knowledge_single_kc() {
    let logit = ln(0.7 / 0.3);
    let fit = hand_fit(&[("a", logit)], &[("k", 0.0, 0.0)]);
    let table = table_with(&[("a", &["k"])]);
    let est = knowledge_estimates(&fit, &table, 0.95).unwrap();
    assert!((est[0].total - 0.7).abs() < 1e-12);
    assert!((est[0].average - 0.7).abs() < 1e-12);
    assert_eq!(est[0].mastered_count, 0);
}

#[test]
fn knowledge_ten_mastered_kcs() {
    let kcs: Vec<String> = (0..10).map(|i| format!("k{i}")).collect();
    let logit = ln(0.96 / 0.04);
    let spec: Vec<(&str, f64, f64)> = kcs.iter().map(|k| (k.as_str(), logit, 0.0)).collect();
    let fit = hand_fit(&[("a", 0.0)], &spec);
    let names: Vec<&str> = kcs.iter().map(String::as_str).collect();
    let table = table_with(&[("a", &names)]);
    let est = knowledge_estimates(&fit, &table, 0.95).unwrap();
    assert!((est[0].total - 9.6).abs() < 1e-9);
    assert_eq!(est[0].mastered_count, 10);
}

#[test]
fn knowledge_uses_next_opportunity() {
    // final opportunity 3 -> prediction at T = 3
    let fit = hand_fit(&[("a", 0.0)], &[("k", -1.0, 0.5)]);
    let table = table_with(&[("a", &["k"]), ("a", &["k"]), ("a", &["k"])]);
    let est = knowledge_estimates(&fit, &table, 0.95).unwrap();
    assert!((est[0].per_kc_final["k"] - sigmoid(-1.0 + 1.5)).abs() < 1e-12);
}

/// One record per entry, opportunities counted in order.
fn table_with(rows: &[(&str, &[&str])]) -> StudentStepTable {
    let mut counts: BTreeMap<(String, String), u32> = BTreeMap::new();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (s, kcs))| {
            let opportunity = kcs
                .iter()
                .map(|k| {
                    let c = counts.entry((s.to_string(), k.to_string())).or_insert(0);
                    *c += 1;
                    (k.to_string(), *c)
                })
                .collect();
            crate::logstore::StudentStepRecord {
                student_id: s.to_string(),
                session_id: "x".into(),
                problem_id: "p".into(),
                step_id: format!("s{i}"),
                first_attempt_outcome: crate::Outcome::Correct,
                first_attempt_time: i as f64,
                final_outcome: crate::Outcome::Correct,
                attempts: 1,
                kcs: kcs.iter().map(|k| k.to_string()).collect(),
                opportunity,
                condition_tag: None,
                unit_tag: None,
            }
        })
        .collect();
    StudentStepTable::from_records("m", records)
}

#[test]
fn converges_when_objective_is_flat_at_float_resolution() {
    let table = synthetic_table(&AfmSynthConfig::random_kcs(300, 15, 20, 1001));
    let fit = fit_afm(&table, &AfmConfig::default()).unwrap();
    assert!(fit.max_gradient <= 1e-6);
}

#[test]
fn condition_fit_takes_full_step_below_float_resolution() {
    let mut cfg = AfmSynthConfig::random_kcs(500, 5, 10, 3105);
    cfg.conditions = Some(("control".into(), "treated".into()));
    let effect = afm_condition_effect(&synthetic_table(&cfg), &AfmConfig::default()).unwrap();
    assert!(effect.fit.max_gradient <= 1e-6);
    assert!(effect.delta.abs() < 0.1);
}
