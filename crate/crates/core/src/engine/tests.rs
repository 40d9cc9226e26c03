use super::*;
use crate::backend::sim::SimBackend;
use crate::simlab::suite::chain_suite;
use crate::simlab::SimSetup;
use crate::types::AcceptanceThreshold;
use proptest::prelude::*;

fn cfg(threshold: u8, seed: u64) -> EngineConfig {
    EngineConfig {
        threshold: AcceptanceThreshold::new(threshold).unwrap(),
        seed,
        ..EngineConfig::default()
    }
}

fn problem(seed: u64, len: usize) -> String {
    chain_suite(seed, 1, 97, len)[0].render()
}

fn pair() -> (SimBackend, SimBackend) {
    SimSetup::default().backends()
}

#[test]
fn reject_all_matches_base_only() {
    let (s, b) = pair();
    for seed in 0..10 {
        let p = problem(seed, 10);
        let sr = run_trajectory(&cfg(10, seed), &p, &s, &b).unwrap();
        let bo = run_scheme(Scheme::BaseOnly, &cfg(10, seed), &p, &s, &b).unwrap();
        assert_eq!(sr.cot_text(), bo.cot_text());
        assert_eq!(sr.final_answer(), bo.final_answer());
        assert_eq!(sr.count(StepAction::AcceptedSpeculation), 0);
    }
}

#[test]
fn accept_all_keeps_every_draft() {
    let (s, b) = pair();
    for seed in 0..10 {
        let r = run_trajectory(&cfg(0, seed), &problem(seed, 10), &s, &b).unwrap();
        assert!(!r.state.retained_steps.is_empty());
        assert!(r.state.retained_steps.iter().all(|s| s.producer == StepProducer::Speculator));
        assert!(r.rejected_steps.is_empty());
    }
}

#[test]
fn force_first_n_examples() {
    let c = |n| EngineConfig {
        force_first_n: n,
        ..EngineConfig::default()
    };
    assert!(!force_first_n(&c(0), 0));
    assert!(force_first_n(&c(10), 9));
    assert!(!force_first_n(&c(10), 10));
}

#[test]
fn forced_steps_counted() {
    let (s, b) = pair();
    for n in [0, 3, 8, 30] {
        let c = EngineConfig {
            force_first_n: n,
            ..cfg(7, 1)
        };
        let r = run_trajectory(&c, &problem(2, 12), &s, &b).unwrap();
        let forced = r.count(StepAction::ForcedBase);
        assert_eq!(forced, n.min(r.outcomes.len()));
        assert!(r.state.retained_steps[..forced].iter().all(|s| s.producer == StepProducer::BaseForced));
    }
}

#[test]
fn latency_sums_exactly() {
    let (s, b) = pair();
    let r = run_trajectory(&cfg(7, 3), &problem(3, 15), &s, &b).unwrap();
    let sum: f64 = r.state.retained_steps.iter().map(|s| s.latency.total()).sum();
    assert_eq!(r.latency_s(), sum + r.answer_latency_s);
    assert!(r.answer_latency_s > 0.0);
}

#[test]
fn tight_budget_truncates_and_flags() {
    let (s, b) = pair();
    let c = EngineConfig {
        token_budget: 50,
        ..cfg(7, 4)
    };
    let r = run_trajectory(&c, &problem(4, 20), &s, &b).unwrap();
    assert!(r.budget_exhausted);
    assert!(r.state.thinking_tokens_used <= 50);
    assert!(r.state.final_answer.is_some());
}

#[test]
fn role_mismatch_rejected() {
    let (s, b) = pair();
    let err = run_trajectory(&cfg(7, 0), &problem(0, 4), &b, &s).unwrap_err();
    assert!(matches!(err, EngineError::RoleMismatch { .. }));
}

#[test]
fn hierarchical_keeps_text() {
    let (s, b) = pair();
    for seed in 0..5 {
        let p = problem(seed, 12);
        let plain = run_trajectory(&cfg(7, seed), &p, &s, &b).unwrap();
        let h = EngineConfig {
            hierarchical: true,
            ..cfg(7, seed)
        };
        let hier = run_trajectory(&h, &p, &s, &b).unwrap();
        assert_eq!(plain.cot_text(), hier.cot_text());
        assert!(!hier.rounds.is_empty() || hier.rejected_steps.is_empty());
    }
}

#[test]
fn calibrated_acceptance_fraction() {
    // small errs with p = 0.3, the judge is exact: the accepted share of
    // retained steps should sit near 0.70
    let setup = SimSetup::calibrated(0.70);
    let (s, b) = setup.backends();
    let tasks = chain_suite(11, 200, 97, 20);
    let (mut acc, mut total) = (0, 0);
    for (i, t) in tasks.iter().enumerate() {
        let r = run_trajectory(&cfg(7, i as u64), &t.render(), &s, &b).unwrap();
        acc += r.count(StepAction::AcceptedSpeculation);
        total += r.outcomes.len();
    }
    let f = acc as f64 / total as f64;
    assert!((0.65..=0.75).contains(&f), "{f}");
}

#[test]
fn trace_records_cover_steps() {
    let (s, b) = pair();
    let r = run_trajectory(&cfg(7, 5), &problem(5, 8), &s, &b).unwrap();
    let recs = r.trace_records("t");
    let steps = recs.iter().filter(|x| matches!(x, TraceRecord::Step { .. })).count();
    assert_eq!(steps, r.outcomes.len());
    trace::check_trace_budget(&recs).unwrap();
    let mut buf = Vec::new();
    trace::write_jsonl(&mut buf, &recs).unwrap();
    assert_eq!(trace::read_jsonl(&buf[..]).unwrap(), recs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariants_hold_for_any_knobs(seed in 0u64..1000, threshold in 0u8..=10, n in 0usize..6,
                                     budget in 1usize..400, hierarchical in any::<bool>()) {
        let (s, b) = pair();
        let c = EngineConfig { force_first_n: n, token_budget: budget, hierarchical, ..cfg(threshold, seed) };
        let r = run_trajectory(&c, &problem(seed, 10), &s, &b).unwrap();
        r.state.validate().unwrap();
        r.check_audit().unwrap();
        prop_assert!(r.state.thinking_tokens_used <= budget);
        // every speculated candidate is either retained as accepted or in the rejected list
        let speculated_retained = r.count(StepAction::AcceptedSpeculation);
        let candidates = speculated_retained + r.rejected_steps.len();
        prop_assert!(candidates >= r.count(StepAction::RejectedThenRegenerated) + speculated_retained);
    }

    #[test]
    fn accepted_count_monotone_in_threshold(seed in 0u64..500) {
        let (s, b) = pair();
        let p = problem(seed, 10);
        let mut prev = usize::MAX;
        for t in [0u8, 3, 5, 7, 9, 10] {
            let r = run_trajectory(&cfg(t, seed), &p, &s, &b).unwrap();
            let acc = r.count(StepAction::AcceptedSpeculation);
            prop_assert!(acc <= prev);
            prev = acc;
        }
    }
}
