use std::collections::BTreeMap;

use proptest::prelude::*;
use redesign_core::logstore::{rollup_student_steps, Outcome, Transaction};
use redesign_core::KcModel;

const STEPS: [(&str, &str, &[&str]); 6] = [
    ("p1", "a", &["k1"]),
    ("p1", "b", &["k2"]),
    ("p2", "a", &["k1", "k2"]),
    ("p2", "b", &["k3"]),
    ("p3", "a", &["k3", "k1"]),
    ("p3", "b", &[]),
];

fn model() -> KcModel {
    let rows = STEPS.iter().flat_map(|(p, s, kcs)| kcs.iter().map(move |k| (*p, *s, *k)));
    KcModel::from_rows("m", rows).unwrap()
}

/// Per student: a sequence of (step index, number of failed attempts before
/// the correct one). Each visit is a separate step instance because it
/// ends with a correct attempt.
fn log() -> impl Strategy<Value = Vec<Transaction>> {
    prop::collection::vec(prop::collection::vec((0..STEPS.len(), 0u32..3, any::<bool>()), 1..15), 1..5).prop_map(
        |students| {
            let mut txs = Vec::new();
            for (i, visits) in students.iter().enumerate() {
                let mut t = 1000.0;
                for &(step, fails, hint) in visits {
                    let (p, s, _) = STEPS[step];
                    for a in 0..=fails {
                        let outcome = match (a == fails, hint) {
                            (true, _) => Outcome::Correct,
                            (false, true) => Outcome::Hint,
                            (false, false) => Outcome::Incorrect,
                        };
                        txs.push(Transaction {
                            student_id: format!("s{i}"),
                            session_id: format!("s{i}-x"),
                            timestamp: t,
                            problem_id: p.into(),
                            step_id: s.into(),
                            attempt_index: a + 1,
                            outcome,
                            condition_tag: None,
                            unit_tag: None,
                        });
                        t += 5.0;
                    }
                }
            }
            txs
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn opportunities_are_gap_free(txs in log()) {
        let Ok((table, _)) = rollup_student_steps(&txs, &model()) else { return Ok(()) };
        let mut seen: BTreeMap<(String, String), Vec<u32>> = BTreeMap::new();
        for r in table.records() {
            for (kc, n) in &r.opportunity {
                seen.entry((r.student_id.clone(), kc.clone())).or_default().push(*n);
            }
        }
        for counts in seen.values() {
            let mut c = counts.clone();
            c.sort_unstable();
            prop_assert_eq!(c, (1..=counts.len() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn input_order_does_not_matter(
        (txs, shuffled) in log().prop_flat_map(|t| (Just(t.clone()), Just(t).prop_shuffle()))
    ) {
        let a = rollup_student_steps(&txs, &model());
        let b = rollup_student_steps(&shuffled, &model());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn brute_force_recount(txs in log()) {
        let m = model();
        let Ok((table, diag)) = rollup_student_steps(&txs, &m) else { return Ok(()) };
        let visits = txs.iter().filter(|t| t.outcome == Outcome::Correct).count();
        prop_assert_eq!(diag.step_instances, visits);
        let mapped = txs
            .iter()
            .filter(|t| t.outcome == Outcome::Correct)
            .filter(|t| STEPS.iter().any(|(p, s, k)| *p == t.problem_id && *s == t.step_id && !k.is_empty()))
            .count();
        prop_assert_eq!(table.len(), mapped);

        for r in table.records() {
            prop_assert_eq!(r.first_attempt_outcome == Outcome::Correct, r.attempts == 1);
            for (kc, n) in &r.opportunity {
                let earlier = txs
                    .iter()
                    .filter(|t| t.student_id == r.student_id && t.attempt_index == 1)
                    .filter(|t| t.timestamp <= r.first_attempt_time)
                    .filter(|t| STEPS.iter().any(|(p, s, k)| *p == t.problem_id && *s == t.step_id && k.contains(&kc.as_str())))
                    .count();
                prop_assert_eq!(*n as usize, earlier);
            }
        }
    }
}
