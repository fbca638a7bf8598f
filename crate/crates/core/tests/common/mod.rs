#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use splitsim::engine::log::Record;
use splitsim::metrics::MetricsReport;
use splitsim::*;

/// A randomized but always-feasible simulation input.
#[derive(Debug, Clone)]
pub struct Case {
    pub requests: Vec<Request>,
    pub gpu: GpuSpec,
    pub cost: CostModel,
    pub sched: SchedulerConfig,
    pub disc: SharingDiscipline,
}

impl Case {
    pub fn setup(&self) -> RunSetup<'_> {
        RunSetup {
            gpu: &self.gpu,
            cost: &self.cost,
            scheduler: &self.sched,
            discipline: &self.disc,
        }
    }

    pub fn run(&self) -> Result<(MetricsReport, Vec<Record>)> {
        run_logged(&self.requests, &self.setup())
    }
}

pub fn requests_strategy(max_n: usize) -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec((1u32..=256, 1u32..=24, 0u8..4), 0..=max_n).prop_map(|specs| {
        let mut t = 0.0;
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (inp, out, gap))| {
                t += f64::from(gap) * 0.003;
                Request::new(i as u64, t, inp, out).unwrap()
            })
            .collect()
    })
}

pub fn discipline_strategy() -> impl Strategy<Value = SharingDiscipline> {
    prop_oneof![
        Just(SharingDiscipline::MpsConcurrent),
        Just(SharingDiscipline::Exclusive),
        (0.0005f64..0.01, 0.0f64..0.002).prop_map(|(quantum_s, switch_cost_s)| SharingDiscipline::TimeSliced {
            quantum_s,
            switch_cost_s
        }),
    ]
}

pub fn inner_strategy() -> impl Strategy<Value = InnerPolicy> {
    prop_oneof![
        Just(InnerPolicy::Sequential),
        Just(InnerPolicy::ContinuousBatching),
        Just(InnerPolicy::MixedBatching),
    ]
}

pub fn scheduler_strategy() -> impl Strategy<Value = SchedulerConfig> {
    let base = prop_oneof![
        Just(SchedulerConfig::sequential()),
        Just(SchedulerConfig::continuous()),
        Just(SchedulerConfig::mixed()),
        (1usize..=4).prop_map(SchedulerConfig::splitwiser),
        (2usize..=3, inner_strategy()).prop_map(|(n, inner)| SchedulerConfig::multi_instance(n, inner)),
    ];
    (base, prop::option::of(1usize..=6), any::<bool>()).prop_map(|(mut s, mb, emits)| {
        s.max_batch = mb;
        s.prompt_emits_first_token = emits;
        s
    })
}

/// GPU whose per-instance KV capacity is the largest request peak plus
/// `extra` blocks, so every request fits but admission is often tight.
pub fn tight_gpu(requests: &[Request], n_instances: usize, shared: bool, extra: u64) -> GpuSpec {
    let mut gpu = GpuSpec {
        shared_weights: shared,
        ..GpuSpec::default()
    };
    let peak = requests
        .iter()
        .map(|r| gpu.blocks_for(u64::from(r.input_tokens) + u64::from(r.output_tokens)))
        .max()
        .unwrap_or(1);
    let copies = gpu.weight_copies(n_instances) as f64;
    gpu.mem_budget = gpu.weight_mem_units * copies + (n_instances as u64 * (peak + extra)) as f64 * gpu.block_mem_unit;
    gpu
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (
        requests_strategy(12),
        scheduler_strategy(),
        discipline_strategy(),
        any::<bool>(),
        0u64..=40,
        0.0f64..0.002,
    )
        .prop_map(|(requests, sched, disc, shared, extra, handoff)| {
            let gpu = tight_gpu(&requests, sched.n_instances(), shared, extra);
            let cost = CostModel {
                kv_handoff_s: handoff,
                ..CostModel::default()
            };
            Case {
                requests,
                gpu,
                cost,
                sched,
                disc,
            }
        })
}

/// Replays a log and checks scheduler safety: KV never exceeds capacity,
/// a request is in at most one task at a time, prompts precede steps, and
/// each instance respects its policy's concurrency limit.
pub fn check_log_safety(log: &[Record], policy: InnerPolicy) -> Result<(), String> {
    let mut caps = Vec::new();
    let mut owner: HashMap<u64, usize> = HashMap::new();
    let mut prompted: HashSet<u64> = HashSet::new();
    let mut prompt_done: HashSet<u64> = HashSet::new();
    let mut busy: HashSet<u64> = HashSet::new();
    let mut in_flight: HashMap<u64, (usize, PhaseKind, Vec<u64>)> = HashMap::new();
    let mut last_t = f64::NEG_INFINITY;
    for rec in log {
        if rec.time() < last_t {
            return Err(format!("time went backwards at {rec:?}"));
        }
        last_t = rec.time();
        match rec {
            Record::Begin { kv_capacity, .. } => caps = kv_capacity.clone(),
            Record::Arrival { id, instance, .. } => {
                owner.insert(*id, *instance);
            }
            Record::Kv { instance, blocks, .. } => {
                if *blocks > caps[*instance] {
                    return Err(format!("instance {instance} holds {blocks} > {} blocks", caps[*instance]));
                }
            }
            Record::TaskStart {
                task,
                instance,
                phase,
                batch,
                ..
            } => {
                for id in batch {
                    if owner.get(id) != Some(instance) {
                        return Err(format!("request {id} scheduled on foreign instance {instance}"));
                    }
                    if !busy.insert(*id) {
                        return Err(format!("request {id} in two tasks at once"));
                    }
                    match phase {
                        PhaseKind::Prompt if !prompted.insert(*id) => {
                            return Err(format!("request {id} prompted twice"))
                        }
                        PhaseKind::TokenStep if !prompt_done.contains(id) => {
                            return Err(format!("request {id} stepped before its prompt finished"))
                        }
                        _ => {}
                    }
                }
                in_flight.insert(*task, (*instance, *phase, batch.clone()));
                let mine: Vec<PhaseKind> = in_flight
                    .values()
                    .filter(|(i, _, _)| i == instance)
                    .map(|(_, p, _)| *p)
                    .collect();
                let prompts = mine.iter().filter(|p| **p == PhaseKind::Prompt).count();
                let ok = match policy {
                    InnerPolicy::Sequential | InnerPolicy::ContinuousBatching => mine.len() <= 1,
                    InnerPolicy::MixedBatching => prompts <= 1 && mine.len() - prompts <= 1,
                };
                if !ok {
                    return Err(format!("instance {instance} exceeds its concurrency limit: {mine:?}"));
                }
            }
            Record::TaskComplete { task, .. } => {
                let (_, phase, batch) = in_flight.remove(task).ok_or(format!("unknown task {task}"))?;
                for id in batch {
                    busy.remove(&id);
                    if phase == PhaseKind::Prompt {
                        prompt_done.insert(id);
                    }
                }
            }
            Record::QuantumExpiry { .. } | Record::Util { .. } => {}
        }
    }
    if !in_flight.is_empty() {
        return Err(format!("{} tasks never completed", in_flight.len()));
    }
    Ok(())
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Compares every aggregate of two reports to a relative tolerance.
pub fn reports_close(a: &MetricsReport, b: &MetricsReport, tol: f64) -> Result<(), String> {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => rel_close(x, y, tol),
        _ => false,
    };
    let scalars = [
        ("makespan_s", a.makespan_s, b.makespan_s),
        ("mean_ttft_s", a.mean_ttft_s, b.mean_ttft_s),
        ("tokens_per_s", a.tokens_per_s, b.tokens_per_s),
        ("requests_per_s", a.requests_per_s, b.requests_per_s),
        ("e2e.mean", a.e2e_s.mean, b.e2e_s.mean),
        ("e2e.median", a.e2e_s.median, b.e2e_s.median),
        ("e2e.p99", a.e2e_s.p99, b.e2e_s.p99),
    ];
    for (name, x, y) in scalars {
        if !rel_close(x, y, tol) {
            return Err(format!("{name}: {x} vs {y}"));
        }
    }
    if a.n_requests != b.n_requests || a.total_output_tokens != b.total_output_tokens {
        return Err("request or token counts differ".into());
    }
    if !opt(a.mean_tbt_s, b.mean_tbt_s) || !opt(a.steady_tokens_per_s, b.steady_tokens_per_s) {
        return Err("tbt or steady-state throughput differ".into());
    }
    for (x, y) in a.requests.iter().zip(&b.requests) {
        if x.id != y.id || !rel_close(x.ttft_s(), y.ttft_s(), tol) || !rel_close(x.e2e_s(), y.e2e_s(), tol) {
            return Err(format!("request {} differs", x.id));
        }
    }
    for (x, y) in a.instances.iter().zip(&b.instances) {
        if !rel_close(x.batch_elapsed_s, y.batch_elapsed_s, tol) || x.kv_series.len() != y.kv_series.len() {
            return Err(format!("instance {} differs", x.id));
        }
    }
    if a.tasks.len() != b.tasks.len() || a.utilization.len() != b.utilization.len() {
        return Err("task or utilization series lengths differ".into());
    }
    Ok(())
}

pub const ORACLE_C: f64 = 100.0;
pub const ORACLE_M: f64 = 50.0;

/// A hand-built task timeline with completion times solved in closed form.
pub struct Oracle {
    pub name: &'static str,
    pub jobs: Vec<(f64, PhaseTask)>,
    pub discipline: SharingDiscipline,
    pub expected: Vec<f64>,
}

/// Task with the given share of C and M while running alone for `d` seconds.
pub fn rate_task(instance: usize, c_share: f64, m_share: f64, d: f64) -> PhaseTask {
    PhaseTask::raw(
        PhaseKind::Prompt,
        instance,
        c_share * ORACLE_C * d,
        m_share * ORACLE_M * d,
        d,
    )
}

pub fn oracle_scenarios() -> Vec<Oracle> {
    vec![
        // sigma = 2 throughout
        Oracle {
            name: "pure-compute pair",
            jobs: vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.0, rate_task(1, 1.0, 0.0, 1.0))],
            discipline: SharingDiscipline::MpsConcurrent,
            expected: vec![2.0, 2.0],
        },
        // sigma = 2 until the short task ends at 1.0 (half of each done),
        // then the long one runs its remaining 1.0 s alone
        Oracle {
            name: "pure-memory pair",
            jobs: vec![(0.0, rate_task(0, 0.0, 1.0, 1.5)), (0.0, rate_task(1, 0.0, 1.0, 0.5))],
            discipline: SharingDiscipline::MpsConcurrent,
            expected: vec![2.0, 1.0],
        },
        // disjoint resources, sigma = 1
        Oracle {
            name: "complementary pair",
            jobs: vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.0, rate_task(1, 0.0, 1.0, 1.0))],
            discipline: SharingDiscipline::MpsConcurrent,
            expected: vec![1.0, 1.0],
        },
        // T1 alone to 0.5, both at half speed until T1 ends at 1.5,
        // T2 (half done) alone to 2.0
        Oracle {
            name: "staggered join",
            jobs: vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.5, rate_task(1, 1.0, 0.0, 1.0))],
            discipline: SharingDiscipline::MpsConcurrent,
            expected: vec![1.5, 2.0],
        },
        // 2 s of work in 0.1 s quanta: 20 quanta, 19 switches; T1 owns the
        // odd quanta, so its last one ends at 19 * 0.1 + 18 * 0.01
        Oracle {
            name: "time-sliced pair",
            jobs: vec![(0.0, rate_task(0, 1.0, 0.0, 1.0)), (0.0, rate_task(1, 1.0, 0.0, 1.0))],
            discipline: SharingDiscipline::TimeSliced {
                quantum_s: 0.1,
                switch_cost_s: 0.01,
            },
            expected: vec![2.08, 2.19],
        },
        // sigma = 1.2 from the compute pair slows the memory task too;
        // it ends at 0.6, after which sigma stays 1.2
        Oracle {
            name: "three-task global slowdown",
            jobs: vec![
                (0.0, rate_task(0, 0.6, 0.0, 1.0)),
                (0.0, rate_task(1, 0.6, 0.0, 1.0)),
                (0.0, rate_task(2, 0.0, 1.0, 0.5)),
            ],
            discipline: SharingDiscipline::MpsConcurrent,
            expected: vec![1.2, 1.2, 0.6],
        },
    ]
}
