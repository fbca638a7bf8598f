//! Batching policies.
//!
//! Every instance owns an [`InstanceScheduler`] running one of the inner
//! policies (sequential, continuous, mixed). The composite policies only
//! decide how requests are laid out over instances: pipelined Splitwiser
//! cuts the workload into contiguous shards run sequentially on their own
//! logical process, multi-instance deals requests round-robin.
//!
//! Admission reserves each request's peak KV footprint,
//! `ceil((input + output) / B)` blocks, so a request admitted once can always
//! grow to completion without preemption.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpu::{KvBlockPool, PhaseKind};
use crate::workload::{Request, RequestState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Sequential,
    PipelinedSplitwiser,
    ContinuousBatching,
    MixedBatching,
    MultiInstance,
}

/// Policies that run inside a single instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerPolicy {
    Sequential,
    ContinuousBatching,
    MixedBatching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: PolicyKind,
    /// Number of Splitwiser sub-processes.
    #[serde(rename = "P", default = "one")]
    pub p: usize,
    #[serde(default = "two")]
    pub n_instances: usize,
    /// Concurrent sequences per instance; `None` admits the whole workload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<usize>,
    #[serde(default = "default_inner")]
    pub inner: InnerPolicy,
    /// When set, the prompt task yields the first output token and only
    /// `output_tokens - 1` decode steps follow.
    #[serde(default)]
    pub prompt_emits_first_token: bool,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn default_inner() -> InnerPolicy {
    InnerPolicy::ContinuousBatching
}

impl SchedulerConfig {
    pub fn new(policy: PolicyKind) -> Self {
        SchedulerConfig {
            policy,
            p: 1,
            n_instances: 2,
            max_batch: None,
            inner: default_inner(),
            prompt_emits_first_token: false,
        }
    }

    pub fn sequential() -> Self {
        Self::new(PolicyKind::Sequential)
    }

    pub fn continuous() -> Self {
        Self::new(PolicyKind::ContinuousBatching)
    }

    pub fn mixed() -> Self {
        Self::new(PolicyKind::MixedBatching)
    }

    pub fn splitwiser(p: usize) -> Self {
        SchedulerConfig {
            p,
            ..Self::new(PolicyKind::PipelinedSplitwiser)
        }
    }

    pub fn multi_instance(n_instances: usize, inner: InnerPolicy) -> Self {
        SchedulerConfig {
            n_instances,
            inner,
            ..Self::new(PolicyKind::MultiInstance)
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = Some(max_batch);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::config("scheduler.P", "must be >= 1"));
        }
        if self.policy == PolicyKind::MultiInstance && self.n_instances < 2 {
            return Err(Error::config("scheduler.n_instances", "multi_instance needs >= 2 instances"));
        }
        if self.max_batch == Some(0) {
            return Err(Error::config("scheduler.max_batch", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        match self.policy {
            PolicyKind::PipelinedSplitwiser => self.p,
            PolicyKind::MultiInstance => self.n_instances,
            _ => 1,
        }
    }

    /// Inner policy run by every instance.
    pub fn instance_policy(&self) -> InnerPolicy {
        match self.policy {
            PolicyKind::Sequential | PolicyKind::PipelinedSplitwiser => InnerPolicy::Sequential,
            PolicyKind::ContinuousBatching => InnerPolicy::ContinuousBatching,
            PolicyKind::MixedBatching => InnerPolicy::MixedBatching,
            PolicyKind::MultiInstance => self.inner,
        }
    }

    /// Instances that may only start once their predecessor has finished
    /// its first prompt (the Splitwiser stagger). A single shard has no
    /// predecessor and no handoff, so P = 1 is plain Sequential.
    pub fn staggered(&self) -> bool {
        self.policy == PolicyKind::PipelinedSplitwiser && self.p > 1
    }

    /// Assigns each request position to an instance.
    pub fn layout(&self, n_requests: usize) -> Vec<Vec<usize>> {
        match self.policy {
            PolicyKind::PipelinedSplitwiser => contiguous_shards(n_requests, self.p),
            PolicyKind::MultiInstance => multi_instance_split(n_requests, self.n_instances),
            _ => vec![(0..n_requests).collect()],
        }
    }
}

/// Round-robin split by arrival order; instance sizes differ by at most one.
pub fn multi_instance_split(n_requests: usize, n_instances: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(n_requests / n_instances.max(1) + 1); n_instances.max(1)];
    for i in 0..n_requests {
        out[i % n_instances.max(1)].push(i);
    }
    out
}

/// `p` contiguous shards of sizes `n / p` or `n / p + 1`, larger ones first.
pub fn contiguous_shards(n_requests: usize, p: usize) -> Vec<Vec<usize>> {
    let p = p.max(1);
    let (base, extra) = (n_requests / p, n_requests % p);
    let mut start = 0;
    (0..p)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let shard = (start..start + len).collect();
            start += len;
            shard
        })
        .collect()
}

/// Request table shared by all instances of one run, indexed by position.
#[derive(Debug, Clone)]
pub struct RequestTable {
    pub requests: Vec<Request>,
    pub generated: Vec<u32>,
}

impl RequestTable {
    pub fn new(requests: Vec<Request>) -> Self {
        let n = requests.len();
        RequestTable {
            requests,
            generated: vec![0; n],
        }
    }

    fn peak_blocks(&self, idx: usize, block_tokens: u32) -> u64 {
        let r = &self.requests[idx];
        (r.input_tokens as u64 + r.output_tokens as u64).div_ceil(block_tokens as u64)
    }

    fn resident_tokens(&self, idx: usize) -> u64 {
        self.requests[idx].input_tokens as u64 + self.generated[idx] as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueState {
    /// Arrived, prompt not yet scheduled.
    pub waiting: VecDeque<usize>,
    /// Prompt in flight.
    pub prompting: Vec<usize>,
    /// Mid-generation.
    pub running: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPlan {
    pub kind: PhaseKind,
    pub batch: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct InstanceScheduler {
    pub id: usize,
    pub policy: InnerPolicy,
    pub max_batch: usize,
    pub prompt_emits_first_token: bool,
    pub queue: QueueState,
    pub pool: KvBlockPool,
    committed_peak: u64,
    prompt_in_flight: bool,
    step_in_flight: bool,
    /// Sequential only: the batch currently being served.
    current_batch: Vec<usize>,
}

impl InstanceScheduler {
    pub fn new(id: usize, policy: InnerPolicy, max_batch: usize, pool: KvBlockPool, prompt_emits_first_token: bool) -> Self {
        InstanceScheduler {
            id,
            policy,
            max_batch,
            prompt_emits_first_token,
            queue: QueueState::default(),
            pool,
            committed_peak: 0,
            prompt_in_flight: false,
            step_in_flight: false,
            current_batch: Vec::new(),
        }
    }

    pub fn arrive(&mut self, idx: usize) {
        self.queue.waiting.push_back(idx);
    }

    pub fn is_drained(&self) -> bool {
        self.queue.waiting.is_empty() && self.queue.prompting.is_empty() && self.queue.running.is_empty()
    }

    pub fn has_in_flight(&self) -> bool {
        self.prompt_in_flight || self.step_in_flight
    }

    /// Peak blocks reserved by resident requests.
    pub fn committed_blocks(&self) -> u64 {
        self.committed_peak
    }

    /// Admits waiting requests in FIFO order until `limit` is reached or
    /// the head does not fit; allocates their prompt KV.
    fn admit(&mut self, table: &mut RequestTable, limit: usize) -> Result<Vec<usize>> {
        let mut admitted = Vec::new();
        let bt = self.pool.block_tokens();
        while admitted.len() < limit {
            let Some(&idx) = self.queue.waiting.front() else { break };
            let peak = table.peak_blocks(idx, bt);
            if self.committed_peak + peak > self.pool.capacity() {
                break;
            }
            self.queue.waiting.pop_front();
            self.pool.kv_alloc(table.requests[idx].id, table.resident_tokens(idx))?;
            self.committed_peak += peak;
            table.requests[idx].advance(RequestState::Prompting)?;
            admitted.push(idx);
        }
        self.queue.prompting.extend_from_slice(&admitted);
        Ok(admitted)
    }

    fn prompt(&mut self, batch: Vec<usize>) -> TaskPlan {
        self.prompt_in_flight = true;
        TaskPlan {
            kind: PhaseKind::Prompt,
            batch,
        }
    }

    fn step(&mut self, batch: Vec<usize>) -> TaskPlan {
        self.step_in_flight = true;
        TaskPlan {
            kind: PhaseKind::TokenStep,
            batch,
        }
    }

    /// Decision point: returns the tasks to start now.
    pub fn next(&mut self, table: &mut RequestTable) -> Result<Vec<TaskPlan>> {
        match self.policy {
            InnerPolicy::Sequential => Ok(self.sequential_next(table)?.into_iter().collect()),
            InnerPolicy::ContinuousBatching => Ok(self.continuous_batching_next(table)?.into_iter().collect()),
            InnerPolicy::MixedBatching => self.mixed_batching_next(table),
        }
    }

    /// Whole batch through the prompt phase, then decode steps until every
    /// member is done, then the next batch.
    pub fn sequential_next(&mut self, table: &mut RequestTable) -> Result<Option<TaskPlan>> {
        if self.has_in_flight() {
            return Ok(None);
        }
        if !self.current_batch.is_empty() {
            return Ok(Some(self.step(self.current_batch.clone())));
        }
        let batch = self.admit(table, self.max_batch)?;
        if batch.is_empty() {
            return Ok(None);
        }
        self.current_batch = batch.clone();
        Ok(Some(self.prompt(batch)))
    }

    /// Binary choice per step: prompt for admissible waiting requests if
    /// any (waiting-first), otherwise one decode step for the running set.
    pub fn continuous_batching_next(&mut self, table: &mut RequestTable) -> Result<Option<TaskPlan>> {
        if self.has_in_flight() {
            return Ok(None);
        }
        let room = self.max_batch.saturating_sub(self.queue.running.len());
        let batch = self.admit(table, room)?;
        if !batch.is_empty() {
            return Ok(Some(self.prompt(batch)));
        }
        if !self.queue.running.is_empty() {
            return Ok(Some(self.step(self.queue.running.clone())));
        }
        Ok(None)
    }

    /// A prompt batch and a decode step may be in flight at the same time.
    pub fn mixed_batching_next(&mut self, table: &mut RequestTable) -> Result<Vec<TaskPlan>> {
        let mut out = Vec::new();
        if !self.prompt_in_flight {
            let room = self
                .max_batch
                .saturating_sub(self.queue.running.len() + self.queue.prompting.len());
            let batch = self.admit(table, room)?;
            if !batch.is_empty() {
                out.push(self.prompt(batch));
            }
        }
        if !self.step_in_flight && !self.queue.running.is_empty() {
            out.push(self.step(self.queue.running.clone()));
        }
        Ok(out)
    }

    /// Applies a finished task. Returns the requests that finished.
    pub fn complete(&mut self, kind: PhaseKind, batch: &[usize], table: &mut RequestTable) -> Result<Vec<usize>> {
        let mut finished = Vec::new();
        match kind {
            PhaseKind::Prompt => {
                self.prompt_in_flight = false;
                self.queue.prompting.retain(|i| !batch.contains(i));
                for &idx in batch {
                    table.requests[idx].advance(RequestState::Generating)?;
                    self.queue.running.push(idx);
                    if self.prompt_emits_first_token && self.emit_token(idx, table)? {
                        finished.push(idx);
                    }
                }
            }
            PhaseKind::TokenStep => {
                self.step_in_flight = false;
                for &idx in batch {
                    if table.requests[idx].state != RequestState::Generating {
                        return Err(Error::contract(format!(
                            "token step for request {} in state {:?}",
                            table.requests[idx].id, table.requests[idx].state
                        )));
                    }
                    if self.emit_token(idx, table)? {
                        finished.push(idx);
                    }
                }
            }
        }
        if !finished.is_empty() {
            self.queue.running.retain(|i| !finished.contains(i));
            self.current_batch.retain(|i| !finished.contains(i));
        }
        Ok(finished)
    }

    /// Counts one generated token; grows or frees KV. True when finished.
    fn emit_token(&mut self, idx: usize, table: &mut RequestTable) -> Result<bool> {
        table.generated[idx] += 1;
        let req = &table.requests[idx];
        if table.generated[idx] > req.output_tokens {
            return Err(Error::contract(format!("request {} over-generated", req.id)));
        }
        if table.generated[idx] == req.output_tokens {
            self.pool.kv_free(req.id)?;
            self.committed_peak -= table.peak_blocks(idx, self.pool.block_tokens());
            table.requests[idx].advance(RequestState::Finished)?;
            return Ok(true);
        }
        self.pool.kv_alloc(req.id, table.resident_tokens(idx))?;
        Ok(false)
    }
}
