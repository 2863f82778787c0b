use proptest::prelude::*;
use redesign::ingest::{parse_transactions, write_transactions, FormatSpec, IngestOptions};
use redesign_core::logstore::{sort_transactions, Outcome, Transaction};

fn transaction() -> impl Strategy<Value = Transaction> {
    let id = "[a-zA-Z0-9_][a-zA-Z0-9_ .-]{0,7}";
    let tag = prop::option::of("[a-z][a-z0-9 ]{0,6}[a-z0-9]");
    (
        (id, id, 1_000_000_000u32..2_000_000_000u32, id, id),
        (1u32..6, prop_oneof![Just(Outcome::Correct), Just(Outcome::Incorrect), Just(Outcome::Hint)]),
        (tag.clone(), tag),
    )
        .prop_map(|((student, session, t, problem, step), (attempt, outcome), (condition, unit))| Transaction {
            student_id: student,
            session_id: session,
            timestamp: f64::from(t) + 0.5,
            problem_id: problem,
            step_id: step,
            attempt_index: attempt,
            outcome,
            condition_tag: condition,
            unit_tag: unit,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialize_then_ingest_is_identity(mut txs in prop::collection::vec(transaction(), 1..40)) {
        let mut buf = Vec::new();
        write_transactions(&mut buf, &txs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let got = parse_transactions(&text, &FormatSpec::default(), &IngestOptions::default()).unwrap();
        sort_transactions(&mut txs);
        prop_assert_eq!(got.diagnostics.dropped_rows, 0);
        prop_assert_eq!(&got.transactions, &txs);

        let mut again = Vec::new();
        write_transactions(&mut again, &got.transactions).unwrap();
        let mut sorted = Vec::new();
        write_transactions(&mut sorted, &txs).unwrap();
        prop_assert_eq!(again, sorted);
    }
}
