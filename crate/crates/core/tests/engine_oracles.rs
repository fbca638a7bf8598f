mod common;

use common::*;
use splitsim::engine::log::Record;
use splitsim::engine::run_tasks;
use splitsim::*;

#[test]
fn closed_form_timelines() {
    for o in oracle_scenarios() {
        let done = run_tasks(&o.jobs, ORACLE_C, ORACLE_M, o.discipline).unwrap();
        for (got, want) in done.iter().zip(&o.expected) {
            assert!(rel_close(*got, *want, 1e-9), "{}: {done:?} vs {:?}", o.name, o.expected);
        }
    }
}

#[test]
fn time_sliced_single_instance_matches_exclusive() {
    let jobs = vec![
        (0.0, rate_task(0, 1.0, 0.0, 0.7)),
        (0.2, rate_task(0, 0.0, 1.0, 0.4)),
        (0.3, rate_task(0, 0.5, 0.5, 0.3)),
    ];
    let ts = SharingDiscipline::TimeSliced {
        quantum_s: 0.05,
        switch_cost_s: 0.0,
    };
    let a = run_tasks(&jobs, ORACLE_C, ORACLE_M, ts).unwrap();
    let b = run_tasks(&jobs, ORACLE_C, ORACLE_M, SharingDiscipline::Exclusive).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(rel_close(*x, *y, 1e-12), "{a:?} vs {b:?}");
    }
}

#[test]
fn long_quantum_switches_once() {
    let jobs = vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.0, rate_task(1, 1.0, 0.0, 1.0))];
    let ts = SharingDiscipline::TimeSliced {
        quantum_s: 10.0,
        switch_cost_s: 0.01,
    };
    let done = run_tasks(&jobs, ORACLE_C, ORACLE_M, ts).unwrap();
    assert!(rel_close(done[1], 2.01, 1e-12), "{done:?}");
}

/// GPU and costs under which a prompt of `n` tokens takes `n / 1024` s and
/// every decode step takes exactly 0.1 s.
fn hand_timed() -> (GpuSpec, CostModel) {
    let gpu = GpuSpec {
        compute_capacity: 1024.0,
        mem_bandwidth: 1.0e9,
        mem_budget: 1.0e6,
        weight_mem_units: 0.0,
        ..GpuSpec::default()
    };
    let cost = CostModel {
        prompt_compute_per_token: 1.0,
        prompt_mem_per_token: 0.0,
        token_compute_per_req_step: 0.0,
        token_mem_weight_fraction: 0.0,
        token_mem_per_kv_block: 0.0,
        prompt_overhead_s: 0.0,
        step_overhead_s: 0.1,
        kv_handoff_s: 0.0,
    };
    (gpu, cost)
}

#[test]
fn single_request_hand_trace() {
    let (gpu, cost) = hand_timed();
    let reqs = vec![Request::new(0, 0.0, 1024, 20).unwrap()];
    let sched = SchedulerConfig::continuous();
    let r = run(
        &reqs,
        &RunSetup {
            gpu: &gpu,
            cost: &cost,
            scheduler: &sched,
            discipline: &SharingDiscipline::Exclusive,
        },
    )
    .unwrap();
    assert!(rel_close(r.makespan_s, 3.0, 1e-12), "{}", r.makespan_s);
    // the first decode step produces the first token
    assert!(rel_close(r.requests[0].ttft_s(), 1.1, 1e-12));
    assert_eq!(r.requests[0].token_times_s.len(), 20);
}

#[test]
fn split_instances_on_disjoint_resources_finish_together() {
    let jobs = vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.0, rate_task(1, 0.0, 1.0, 1.0))];
    let done = run_tasks(&jobs, ORACLE_C, ORACLE_M, SharingDiscipline::MpsConcurrent).unwrap();
    assert_eq!(done, vec![1.0, 1.0]);
}

/// Splitwiser with two shards of one request each, prompts on compute
/// only and decode on memory only.
fn pipeline_makespan(p_s: f64, steps: u32) -> f64 {
    let gpu = GpuSpec {
        compute_capacity: 1000.0,
        mem_bandwidth: 1000.0,
        mem_budget: 1100.0,
        weight_mem_units: 100.0,
        ..GpuSpec::default()
    };
    let cost = CostModel {
        prompt_compute_per_token: 1.0,
        prompt_mem_per_token: 0.0,
        token_compute_per_req_step: 0.0,
        token_mem_weight_fraction: 1.0,
        token_mem_per_kv_block: 0.0,
        prompt_overhead_s: 0.0,
        step_overhead_s: 0.0,
        kv_handoff_s: 0.0,
    };
    let tokens = (p_s * 1000.0) as u32;
    let reqs = vec![
        Request::new(0, 0.0, tokens, steps).unwrap(),
        Request::new(1, 0.0, tokens, steps).unwrap(),
    ];
    let sched = SchedulerConfig::splitwiser(2);
    run(
        &reqs,
        &RunSetup {
            gpu: &gpu,
            cost: &cost,
            scheduler: &sched,
            discipline: &SharingDiscipline::MpsConcurrent,
        },
    )
    .unwrap()
    .makespan_s
}

#[test]
fn two_stage_pipeline_oracle() {
    // each decode step is 0.1 s of pure memory traffic
    let (p, g) = (0.5, 1.0);
    assert!(rel_close(pipeline_makespan(p, 10), p + 2.0 * g, 1e-9));
    let (p, g) = (0.5, 0.2);
    assert!(rel_close(pipeline_makespan(p, 2), 2.0 * p + g, 1e-9));
}

#[test]
fn arrival_enqueued_first_wins_a_tie() {
    let (gpu, cost) = hand_timed();
    // request 1 arrives exactly when request 0's prompt completes
    let reqs = vec![
        Request::new(0, 0.0, 1024, 2).unwrap(),
        Request::new(1, 1.0, 512, 2).unwrap(),
    ];
    let sched = SchedulerConfig::continuous();
    let (_, log) = run_logged(
        &reqs,
        &RunSetup {
            gpu: &gpu,
            cost: &cost,
            scheduler: &sched,
            discipline: &SharingDiscipline::Exclusive,
        },
    )
    .unwrap();
    let at_one: Vec<&str> = log
        .iter()
        .filter(|r| r.time() == 1.0 && matches!(r, Record::Arrival { .. } | Record::TaskComplete { .. }))
        .map(Record::kind)
        .collect();
    assert_eq!(at_one, vec!["arrival", "task_complete"]);
    // the newcomer is prompted before request 0 takes its first step
    let first_start_after = log
        .iter()
        .find_map(|r| match r {
            Record::TaskStart { t, phase, batch, .. } if *t == 1.0 => Some((*phase, batch.clone())),
            _ => None,
        })
        .unwrap();
    assert_eq!(first_start_after, (PhaseKind::Prompt, vec![1]));
}

#[test]
fn utilization_traces() {
    let (gpu, cost) = hand_timed();
    let reqs = vec![Request::new(0, 0.0, 1024, 1).unwrap()];
    let sched = SchedulerConfig::sequential();
    let r = run(
        &reqs,
        &RunSetup {
            gpu: &gpu,
            cost: &cost,
            scheduler: &sched,
            discipline: &SharingDiscipline::MpsConcurrent,
        },
    )
    .unwrap();
    // saturating prompt, then an overhead-only step, then idle
    let u = &r.utilization;
    assert_eq!((u[0].time_s, u[0].compute_pct), (0.0, 100.0));
    assert_eq!(u.last().unwrap().compute_pct, 0.0);
    assert_eq!(u.last().unwrap().mem_pct, 0.0);
}

#[test]
fn mixed_batch_uses_both_resources_at_once() {
    let gpu = GpuSpec::default();
    let cost = CostModel::default();
    let traces = |reqs: &[Request], sched: SchedulerConfig| {
        let r = run(
            reqs,
            &RunSetup {
                gpu: &gpu,
                cost: &cost,
                scheduler: &sched,
                discipline: &SharingDiscipline::MpsConcurrent,
            },
        )
        .unwrap();
        let c: Vec<(f64, f64)> = r.utilization.iter().map(|p| (p.time_s, p.compute_pct)).collect();
        let m: Vec<(f64, f64)> = r.utilization.iter().map(|p| (p.time_s, p.mem_pct)).collect();
        (c, m)
    };
    let mut reqs: Vec<Request> = (0..8).map(|i| Request::new(i, 0.0, 512, 64).unwrap()).collect();
    reqs.push(Request::new(8, 0.01, 1024, 4).unwrap());
    let (mix_c, mix_m) = traces(&reqs, SchedulerConfig::mixed());
    let (tok_c, tok_m) = traces(&reqs[..8], SchedulerConfig::continuous());
    let (pr_c, pr_m) = traces(&reqs[8..], SchedulerConfig::continuous());
    // the late prompt starts on arrival and co-runs with a decode step
    let t = 0.01;
    let at = splitsim::metrics::value_at;
    assert!(at(&mix_c, t) > at(&pr_c, t) && at(&mix_c, t) > at(&tok_c, t));
    assert!(at(&mix_m, t) > at(&pr_m, t) && at(&mix_m, t) > at(&tok_m, t));
}
