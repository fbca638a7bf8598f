//! Discrete-event core.
//!
//! The clock jumps between three kinds of boundaries: queued events
//! (arrivals, quantum expiries), task completions predicted from the current
//! progress rates, and the end of a context-switch dead interval. Everything
//! that falls due at the same instant is handled in sequence-number order,
//! and every instance whose state changed gets a scheduling decision.

pub mod event;
pub mod log;
pub mod sharing;

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::gpu::{make_prompt_task, make_token_step_task, CostModel, GpuSpec, KvBlockPool, PhaseKind, PhaseTask};
use crate::metrics::{MetricsReport, Recorder};
use crate::scheduler::{InstanceScheduler, RequestTable, SchedulerConfig};
use crate::workload::{Request, RequestState};

use event::{EventKind, EventQueue, TaskId};
use log::Record;
use sharing::{ActiveTask, SharedGpu, SharingDiscipline};

/// Consecutive events without a task completion before a run is aborted.
pub const LIVELOCK_EVENTS: u64 = 10_000_000;

/// Everything besides the request stream that determines a run.
#[derive(Debug, Clone, Copy)]
pub struct RunSetup<'a> {
    pub gpu: &'a GpuSpec,
    pub cost: &'a CostModel,
    pub scheduler: &'a SchedulerConfig,
    pub discipline: &'a SharingDiscipline,
}

impl RunSetup<'_> {
    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        self.cost.validate()?;
        self.scheduler.validate()?;
        self.discipline.validate()
    }
}

/// Runs `requests` to completion and returns the metrics report.
pub fn run(requests: &[Request], setup: &RunSetup<'_>) -> Result<MetricsReport> {
    Simulation::new(requests, setup, false)?.run().map(|(r, _)| r)
}

/// Like [`run`], also returning the full event log.
pub fn run_logged(requests: &[Request], setup: &RunSetup<'_>) -> Result<(MetricsReport, Vec<Record>)> {
    Simulation::new(requests, setup, true)?
        .run()
        .map(|(r, log)| (r, log.unwrap_or_default()))
}

struct InFlight {
    instance: usize,
    kind: PhaseKind,
    batch: Vec<usize>,
}

struct Simulation<'a> {
    gpu_spec: &'a GpuSpec,
    cost: CostModel,
    staggered: bool,
    table: RequestTable,
    owner: Vec<usize>,
    shard_sizes: Vec<usize>,
    scheds: Vec<InstanceScheduler>,
    gate_open: Vec<bool>,
    first_prompt_done: Vec<bool>,
    gpu: SharedGpu,
    queue: EventQueue,
    in_flight: HashMap<TaskId, InFlight>,
    next_task: TaskId,
    recorder: Recorder,
    log: Option<Vec<Record>>,
    last_util: Vec<(f64, f64)>,
    last_kv: Vec<u64>,
}

impl<'a> Simulation<'a> {
    fn new(requests: &[Request], setup: &RunSetup<'a>, keep_log: bool) -> Result<Self> {
        setup.validate()?;
        if requests
            .windows(2)
            .any(|w| w[1].arrival_s < w[0].arrival_s)
        {
            return Err(Error::Validation("requests must be sorted by arrival_s".into()));
        }
        let mut ids = HashSet::with_capacity(requests.len());
        for r in requests {
            if !ids.insert(r.id) {
                return Err(Error::Validation(format!("duplicate request id {}", r.id)));
            }
            if r.state != RequestState::Waiting {
                return Err(Error::Validation(format!("request {} is not in Waiting state", r.id)));
            }
        }

        let cfg = setup.scheduler;
        let n_inst = cfg.n_instances();
        let layout = cfg.layout(requests.len());
        let capacity = setup.gpu.per_instance_kv_capacity(n_inst);
        let mut owner = vec![0; requests.len()];
        for (inst, members) in layout.iter().enumerate() {
            for &i in members {
                owner[i] = inst;
            }
        }
        for r in requests {
            let peak = setup
                .gpu
                .blocks_for(r.input_tokens as u64 + r.output_tokens as u64);
            if peak > capacity {
                return Err(Error::config(
                    "gpu.mem_budget",
                    format!(
                        "request {} needs {peak} KV blocks but each of {n_inst} instance(s) holds {capacity}",
                        r.id
                    ),
                ));
            }
        }

        let max_batch = cfg.max_batch.unwrap_or(requests.len().max(1));
        let scheds = (0..n_inst)
            .map(|i| {
                InstanceScheduler::new(
                    i,
                    cfg.instance_policy(),
                    max_batch,
                    KvBlockPool::new(setup.gpu.block_tokens, capacity),
                    cfg.prompt_emits_first_token,
                )
            })
            .collect();

        let mut cost = setup.cost.clone();
        if cfg.staggered() {
            cost.prompt_overhead_s += cost.kv_handoff_s;
        }

        Ok(Simulation {
            gpu_spec: setup.gpu,
            cost,
            staggered: cfg.staggered(),
            table: RequestTable::new(requests.to_vec()),
            owner,
            shard_sizes: layout.iter().map(Vec::len).collect(),
            scheds,
            gate_open: (0..n_inst).map(|i| i == 0 || !cfg.staggered()).collect(),
            first_prompt_done: vec![false; n_inst],
            gpu: SharedGpu::new(setup.gpu.compute_capacity, setup.gpu.mem_bandwidth, *setup.discipline),
            queue: EventQueue::new(),
            in_flight: HashMap::new(),
            next_task: 0,
            recorder: Recorder::new(),
            log: keep_log.then(Vec::new),
            last_util: vec![(0.0, 0.0); n_inst],
            last_kv: vec![0; n_inst],
        })
    }

    fn emit(&mut self, rec: Record) -> Result<()> {
        self.recorder.record_event(&rec)?;
        if let Some(log) = self.log.as_mut() {
            log.push(rec);
        }
        Ok(())
    }

    fn now(&self) -> f64 {
        self.gpu.clock()
    }

    fn run(mut self) -> Result<(MetricsReport, Option<Vec<Record>>)> {
        self.emit(Record::Begin {
            t: 0.0,
            compute_capacity: self.gpu_spec.compute_capacity,
            mem_bandwidth: self.gpu_spec.mem_bandwidth,
            kv_capacity: self.scheds.iter().map(|s| s.pool.capacity()).collect(),
            prompt_emits_first_token: self.scheds.first().is_some_and(|s| s.prompt_emits_first_token),
        })?;
        for (i, r) in self.table.requests.iter().enumerate() {
            self.queue.push(r.arrival_s, EventKind::Arrival(i));
        }
        self.open_gates()?;

        let mut since_completion = 0u64;
        loop {
            if let Some(g) = self.gpu.arbitrate() {
                self.queue.push(
                    g.expires_s,
                    EventKind::QuantumExpiry {
                        instance: g.instance,
                        epoch: g.epoch,
                    },
                );
            }
            self.emit_util()?;

            let tq = self.queue.peek().map(|e| e.time_s);
            let tg = self.gpu.next_boundary();
            let t = match (tq, tg) {
                (None, None) => break,
                (Some(a), None) | (None, Some(a)) => a,
                (Some(a), Some(b)) => a.min(b),
            };
            self.gpu.advance(t);

            let mut due: Vec<(u64, Due)> = self
                .gpu
                .take_due()
                .into_iter()
                .map(|a| (a.seq, Due::Task(a)))
                .collect();
            while self.queue.peek().is_some_and(|e| e.time_s <= t) {
                let e = self.queue.pop().unwrap();
                due.push((e.seq, Due::Event(e.kind)));
            }
            due.sort_by_key(|d| d.0);

            for (_, item) in due {
                match item {
                    Due::Task(active) => {
                        since_completion = 0;
                        self.complete(active)?;
                    }
                    Due::Event(kind) => {
                        since_completion += 1;
                        self.handle(kind)?;
                    }
                }
            }
            if since_completion > LIVELOCK_EVENTS {
                return Err(Error::Livelock {
                    events: since_completion,
                    clock_s: self.now(),
                });
            }
        }

        if let Some(r) = self
            .table
            .requests
            .iter()
            .find(|r| r.state != RequestState::Finished)
        {
            return Err(Error::contract(format!(
                "simulation stalled at {} s with request {} in state {:?}",
                self.now(),
                r.id,
                r.state
            )));
        }
        let report = self.recorder.finish()?;
        Ok((report, self.log))
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::Arrival(idx) => {
                let inst = self.owner[idx];
                let r = &self.table.requests[idx];
                let rec = Record::Arrival {
                    t: self.now(),
                    id: r.id,
                    instance: inst,
                    input_tokens: r.input_tokens,
                    output_tokens: r.output_tokens,
                };
                self.emit(rec)?;
                self.scheds[inst].arrive(idx);
                self.decide(inst)?;
                // an empty predecessor may have been waiting on this shard
                self.open_gates()
            }
            EventKind::QuantumExpiry { instance, epoch } => {
                if !self.gpu.is_current_grant(instance, epoch) {
                    return Ok(());
                }
                self.emit(Record::QuantumExpiry {
                    t: self.now(),
                    instance,
                })?;
                if let Some(g) = self.gpu.on_quantum_expiry(instance, epoch) {
                    self.queue.push(
                        g.expires_s,
                        EventKind::QuantumExpiry {
                            instance: g.instance,
                            epoch: g.epoch,
                        },
                    );
                }
                Ok(())
            }
            EventKind::TaskComplete(id) => Err(Error::contract(format!(
                "task {id} completion must come from the GPU, not the queue"
            ))),
        }
    }

    fn complete(&mut self, active: ActiveTask) -> Result<()> {
        let flight = self
            .in_flight
            .remove(&active.id)
            .ok_or_else(|| Error::contract(format!("completion of unknown task {}", active.id)))?;
        self.emit(Record::TaskComplete {
            t: self.now(),
            task: active.id,
        })?;
        let inst = flight.instance;
        self.scheds[inst].complete(flight.kind, &flight.batch, &mut self.table)?;
        self.emit_kv(inst)?;
        if flight.kind == PhaseKind::Prompt && !self.first_prompt_done[inst] {
            self.first_prompt_done[inst] = true;
            self.open_gates()?;
        }
        self.decide(inst)
    }

    /// Splitwiser stagger: shard `i` starts once shard `i - 1` has finished
    /// its first prompt, or immediately if shard `i - 1` is empty.
    fn open_gates(&mut self) -> Result<()> {
        if !self.staggered {
            return Ok(());
        }
        for i in 1..self.gate_open.len() {
            if !self.gate_open[i]
                && self.gate_open[i - 1]
                && (self.first_prompt_done[i - 1] || self.shard_sizes[i - 1] == 0)
            {
                self.gate_open[i] = true;
                self.decide(i)?;
            }
        }
        Ok(())
    }

    fn decide(&mut self, inst: usize) -> Result<()> {
        if !self.gate_open[inst] {
            return Ok(());
        }
        let plans = self.scheds[inst].next(&mut self.table)?;
        for plan in plans {
            let expected = match plan.kind {
                PhaseKind::Prompt => RequestState::Prompting,
                PhaseKind::TokenStep => RequestState::Generating,
            };
            for &idx in &plan.batch {
                let Some(req) = self.table.requests.get(idx) else {
                    return Err(Error::contract(format!("scheduler referenced unknown request #{idx}")));
                };
                if self.owner[idx] != inst || req.state != expected {
                    return Err(Error::contract(format!(
                        "instance {inst} scheduled {} for request {} in state {:?}",
                        plan.kind.as_str(),
                        req.id,
                        req.state
                    )));
                }
            }
            let refs: Vec<&Request> = plan.batch.iter().map(|&i| &self.table.requests[i]).collect();
            let task: PhaseTask = match plan.kind {
                PhaseKind::Prompt => make_prompt_task(&refs, self.gpu_spec, &self.cost, inst)?,
                PhaseKind::TokenStep => {
                    make_token_step_task(&refs, &self.scheds[inst].pool, self.gpu_spec, &self.cost, inst)?
                }
            };
            let id = self.next_task;
            self.next_task += 1;
            let seq = self.queue.next_seq();
            self.emit(Record::TaskStart {
                t: self.now(),
                task: id,
                instance: inst,
                phase: task.kind,
                batch: task.batch.clone(),
                compute_demand: task.compute_demand,
                mem_demand: task.mem_demand,
                duration_alone_s: task.duration_alone_s,
            })?;
            self.in_flight.insert(
                id,
                InFlight {
                    instance: inst,
                    kind: plan.kind,
                    batch: plan.batch,
                },
            );
            self.gpu.submit(id, seq, task);
        }
        self.emit_kv(inst)
    }

    fn emit_kv(&mut self, inst: usize) -> Result<()> {
        let used = self.scheds[inst].pool.used();
        if used != self.last_kv[inst] {
            self.last_kv[inst] = used;
            self.emit(Record::Kv {
                t: self.now(),
                instance: inst,
                blocks: used,
            })?;
        }
        Ok(())
    }

    fn emit_util(&mut self) -> Result<()> {
        let util = self.gpu.instance_utilization(self.scheds.len());
        for (inst, u) in util.into_iter().enumerate() {
            if u != self.last_util[inst] {
                self.last_util[inst] = u;
                self.emit(Record::Util {
                    t: self.now(),
                    instance: inst,
                    compute_pct: u.0,
                    mem_pct: u.1,
                })?;
            }
        }
        Ok(())
    }
}

enum Due {
    Task(ActiveTask),
    Event(EventKind),
}

/// Plays standalone tasks released at given times through the sharing law
/// and returns each task's completion time. Used to check the engine
/// against closed-form timelines.
pub fn run_tasks(
    releases: &[(f64, PhaseTask)],
    compute_capacity: f64,
    mem_bandwidth: f64,
    discipline: SharingDiscipline,
) -> Result<Vec<f64>> {
    discipline.validate()?;
    let mut gpu = SharedGpu::new(compute_capacity, mem_bandwidth, discipline);
    let mut queue = EventQueue::new();
    for (i, (at, _)) in releases.iter().enumerate() {
        queue.push(*at, EventKind::Arrival(i));
    }
    let mut done = vec![f64::NAN; releases.len()];
    loop {
        if let Some(g) = gpu.arbitrate() {
            queue.push(
                g.expires_s,
                EventKind::QuantumExpiry {
                    instance: g.instance,
                    epoch: g.epoch,
                },
            );
        }
        let t = match (queue.peek().map(|e| e.time_s), gpu.next_boundary()) {
            (None, None) => break,
            (Some(a), None) | (None, Some(a)) => a,
            (Some(a), Some(b)) => a.min(b),
        };
        gpu.advance(t);
        let mut due: Vec<(u64, Due)> = gpu.take_due().into_iter().map(|a| (a.seq, Due::Task(a))).collect();
        while queue.peek().is_some_and(|e| e.time_s <= t) {
            let e = queue.pop().unwrap();
            due.push((e.seq, Due::Event(e.kind)));
        }
        due.sort_by_key(|d| d.0);
        for (_, item) in due {
            match item {
                Due::Task(a) => done[a.id as usize] = t,
                Due::Event(EventKind::Arrival(i)) => {
                    let seq = queue.next_seq();
                    gpu.submit(i as TaskId, seq, releases[i].1.clone());
                }
                Due::Event(EventKind::QuantumExpiry { instance, epoch }) => {
                    if let Some(g) = gpu.on_quantum_expiry(instance, epoch) {
                        queue.push(
                            g.expires_s,
                            EventKind::QuantumExpiry {
                                instance: g.instance,
                                epoch: g.epoch,
                            },
                        );
                    }
                }
                Due::Event(EventKind::TaskComplete(_)) => unreachable!("never queued"),
            }
        }
    }
    Ok(done)
}
