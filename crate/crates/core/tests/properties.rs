mod common;

use common::*;
use proptest::prelude::*;
use splitsim::engine::run_tasks;
use splitsim::*;

fn task_strategy() -> impl Strategy<Value = (f64, PhaseTask)> {
    (0.0f64..2.0, 0usize..3, 0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0)
        .prop_map(|(rel, inst, c, m, d)| (rel, rate_task(inst, c, m, d)))
}

fn releases_strategy() -> impl Strategy<Value = Vec<(f64, PhaseTask)>> {
    prop::collection::vec(task_strategy(), 1..8).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sharing_never_beats_running_alone(jobs in releases_strategy(), disc in discipline_strategy()) {
        let done = run_tasks(&jobs, ORACLE_C, ORACLE_M, disc).unwrap();
        for ((rel, t), end) in jobs.iter().zip(&done) {
            prop_assert!(*end >= rel + t.duration_alone_s * (1.0 - 1e-12), "{end} < {rel} + {}", t.duration_alone_s);
        }
    }

    #[test]
    fn concurrency_is_no_worse_than_serializing(
        jobs in releases_strategy(),
        exclusive in any::<bool>(),
    ) {
        let disc = if exclusive { SharingDiscipline::Exclusive } else { SharingDiscipline::MpsConcurrent };
        let done = run_tasks(&jobs, ORACLE_C, ORACLE_M, disc).unwrap();
        let last_release = jobs.iter().map(|j| j.0).fold(0.0, f64::max);
        let work: f64 = jobs.iter().map(|j| j.1.duration_alone_s).sum();
        let end = done.iter().cloned().fold(0.0, f64::max);
        prop_assert!(end <= last_release + work + 1e-9);
    }

    #[test]
    fn run_level_bounds(case in case_strategy()) {
        let (r, _) = case.run().unwrap();
        let max_e2e = r.requests.iter().map(|q| q.e2e_s()).fold(0.0, f64::max);
        prop_assert!(r.makespan_s >= max_e2e - 1e-12);
        for q in &r.requests {
            let steps = q.output_tokens - u32::from(case.sched.prompt_emits_first_token);
            let floor = steps as f64 * case.cost.step_overhead_s + case.cost.prompt_overhead_s;
            prop_assert!(q.e2e_s() >= floor - 1e-12, "request {} faster than its overheads", q.id);
            prop_assert!(q.ttft_s() <= q.e2e_s());
            prop_assert!(q.token_times_s.windows(2).all(|w| w[1] > w[0]));
        }
        for p in &r.utilization {
            prop_assert!(p.compute_pct <= 100.0 + 1e-9 && p.mem_pct <= 100.0 + 1e-9);
        }
        if r.makespan_s > 0.0 {
            let tokens = r.tokens_per_s * r.makespan_s;
            prop_assert!(rel_close(tokens, r.total_output_tokens as f64, 1e-9));
        }
    }
}
