//! Roofline phase costs and block-granular KV-cache accounting.
//!
//! Units are abstract. Compute is measured in compute-units, memory traffic
//! and memory footprint in memory-units; one KV block occupies
//! `block_mem_unit` memory-units of capacity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::workload::{Request, RequestId};

/// Device capacities and the memory budget shared by weights and KV cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuSpec {
    /// Compute-units per second.
    pub compute_capacity: f64,
    /// Memory-units per second.
    pub mem_bandwidth: f64,
    /// Total device memory available to weights plus KV cache.
    pub mem_budget: f64,
    /// Footprint of one KV block.
    pub block_mem_unit: f64,
    /// Tokens held by one KV block.
    pub block_tokens: u32,
    /// Footprint of one copy of the model weights.
    pub weight_mem_units: f64,
    /// When true, all instances map a single copy of the weights.
    pub shared_weights: bool,
}

impl Default for GpuSpec {
    fn default() -> Self {
        GpuSpec {
            compute_capacity: 1.0e6,
            mem_bandwidth: 1.2e7,
            mem_budget: 2.5e4,
            block_mem_unit: 1.0,
            block_tokens: 16,
            weight_mem_units: 2.0e3,
            shared_weights: true,
        }
    }
}

impl GpuSpec {
    pub fn validate(&self) -> Result<()> {
        positive("gpu.compute_capacity", self.compute_capacity)?;
        positive("gpu.mem_bandwidth", self.mem_bandwidth)?;
        positive("gpu.block_mem_unit", self.block_mem_unit)?;
        non_negative("gpu.weight_mem_units", self.weight_mem_units)?;
        non_negative("gpu.mem_budget", self.mem_budget)?;
        if self.block_tokens == 0 {
            return Err(Error::config("gpu.block_tokens", "must be >= 1"));
        }
        if self.kv_capacity_blocks() < 1 {
            return Err(Error::config(
                "gpu.mem_budget",
                "budget leaves no room for a single KV block after weights",
            ));
        }
        Ok(())
    }

    /// KV blocks left after one resident copy of the weights.
    pub fn kv_capacity_blocks(&self) -> u64 {
        let free = self.mem_budget - self.weight_mem_units;
        if free <= 0.0 {
            0
        } else {
            (free / self.block_mem_unit).floor() as u64
        }
    }

    pub fn weight_copies(&self, n_instances: usize) -> usize {
        if self.shared_weights {
            1
        } else {
            n_instances.max(1)
        }
    }

    pub fn resident_weight_mem(&self, n_instances: usize) -> f64 {
        self.weight_copies(n_instances) as f64 * self.weight_mem_units
    }

    /// Total KV blocks once duplicated weight copies have taken their share.
    pub fn effective_kv_capacity(&self, n_instances: usize) -> u64 {
        let extra = (self.weight_copies(n_instances) - 1) as f64 * self.weight_mem_units;
        let lost = (extra / self.block_mem_unit).ceil() as u64;
        self.kv_capacity_blocks().saturating_sub(lost)
    }

    /// Even split of the effective capacity; each instance owns its pool.
    pub fn per_instance_kv_capacity(&self, n_instances: usize) -> u64 {
        self.effective_kv_capacity(n_instances) / n_instances.max(1) as u64
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_tokens as u64)
    }
}

/// Per-token demand coefficients and fixed per-task overheads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub prompt_compute_per_token: f64,
    pub prompt_mem_per_token: f64,
    pub token_compute_per_req_step: f64,
    /// Fraction of the weights streamed by every token step, in `[0, 1]`.
    pub token_mem_weight_fraction: f64,
    pub token_mem_per_kv_block: f64,
    pub prompt_overhead_s: f64,
    pub step_overhead_s: f64,
    /// Extra latency for handing a prompt's KV cache to the token phase in
    /// split-phase (pipelined) execution.
    pub kv_handoff_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            prompt_compute_per_token: 1.0,
            prompt_mem_per_token: 0.01,
            token_compute_per_req_step: 1.0,
            token_mem_weight_fraction: 1.0,
            token_mem_per_kv_block: 1.0,
            prompt_overhead_s: 0.002,
            step_overhead_s: 0.001,
            kv_handoff_s: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        non_negative("cost.prompt_compute_per_token", self.prompt_compute_per_token)?;
        non_negative("cost.prompt_mem_per_token", self.prompt_mem_per_token)?;
        non_negative("cost.token_compute_per_req_step", self.token_compute_per_req_step)?;
        non_negative("cost.token_mem_per_kv_block", self.token_mem_per_kv_block)?;
        non_negative("cost.prompt_overhead_s", self.prompt_overhead_s)?;
        non_negative("cost.step_overhead_s", self.step_overhead_s)?;
        non_negative("cost.kv_handoff_s", self.kv_handoff_s)?;
        let w = self.token_mem_weight_fraction;
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(
                "cost.token_mem_weight_fraction",
                format!("must lie in [0, 1], got {w}"),
            ));
        }
        Ok(())
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Prompt,
    TokenStep,
}

impl PhaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::Prompt => "prompt",
            PhaseKind::TokenStep => "token_step",
        }
    }
}

impl std::str::FromStr for PhaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(PhaseKind::Prompt),
            "token_step" | "token" => Ok(PhaseKind::TokenStep),
            other => Err(Error::contract(format!("unknown phase `{other}`"))),
        }
    }
}

/// One schedulable unit of GPU work: a merged prompt batch or a single
/// token-generation step over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTask {
    pub kind: PhaseKind,
    pub batch: Vec<RequestId>,
    pub compute_demand: f64,
    pub mem_demand: f64,
    pub duration_alone_s: f64,
    pub instance_id: usize,
}

impl PhaseTask {
    /// Builds a task whose solo duration follows the roofline law
    /// `max(compute / C, mem / M) + overhead`.
    pub fn new(
        kind: PhaseKind,
        batch: Vec<RequestId>,
        compute_demand: f64,
        mem_demand: f64,
        overhead_s: f64,
        spec: &GpuSpec,
        instance_id: usize,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::contract(format!("{} task with empty batch", kind.as_str())));
        }
        let mut seen = batch.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(format!(
                "{} task batch contains duplicate request ids",
                kind.as_str()
            )));
        }
        let duration_alone_s = roofline_time(compute_demand, mem_demand, spec) + overhead_s;
        Ok(PhaseTask {
            kind,
            batch,
            compute_demand,
            mem_demand,
            duration_alone_s,
            instance_id,
        })
    }

    /// A task with explicit demands and duration, bypassing the cost model.
    pub fn raw(
        kind: PhaseKind,
        instance_id: usize,
        compute_demand: f64,
        mem_demand: f64,
        duration_alone_s: f64,
    ) -> Self {
        PhaseTask {
            kind,
            batch: vec![0],
            compute_demand,
            mem_demand,
            duration_alone_s,
            instance_id,
        }
    }

    /// Compute-units per second when running alone.
    pub fn compute_rate(&self) -> f64 {
        self.compute_demand / self.duration_alone_s
    }

    pub fn mem_rate(&self) -> f64 {
        self.mem_demand / self.duration_alone_s
    }
}

pub fn roofline_time(compute_demand: f64, mem_demand: f64, spec: &GpuSpec) -> f64 {
    (compute_demand / spec.compute_capacity).max(mem_demand / spec.mem_bandwidth)
}

pub fn make_prompt_task(
    batch: &[&Request],
    spec: &GpuSpec,
    cm: &CostModel,
    instance_id: usize,
) -> Result<PhaseTask> {
    let tokens: f64 = batch.iter().map(|r| r.input_tokens as f64).sum();
    PhaseTask::new(
        PhaseKind::Prompt,
        batch.iter().map(|r| r.id).collect(),
        cm.prompt_compute_per_token * tokens,
        cm.prompt_mem_per_token * tokens,
        cm.prompt_overhead_s,
        spec,
        instance_id,
    )
}

/// One decode step over `batch`. Every step streams `w_t` of the weights
/// plus every KV block currently held by the batch.
pub fn make_token_step_task(
    batch: &[&Request],
    pool: &KvBlockPool,
    spec: &GpuSpec,
    cm: &CostModel,
    instance_id: usize,
) -> Result<PhaseTask> {
    let mut blocks = 0u64;
    for r in batch {
        blocks += pool.blocks_of(r.id).ok_or_else(|| {
            Error::contract(format!("token step for request {} without KV allocation", r.id))
        })?;
    }
    let compute = cm.token_compute_per_req_step * batch.len() as f64;
    let mem = cm.token_mem_weight_fraction * spec.weight_mem_units
        + cm.token_mem_per_kv_block * blocks as f64;
    PhaseTask::new(
        PhaseKind::TokenStep,
        batch.iter().map(|r| r.id).collect(),
        compute,
        mem,
        cm.step_overhead_s,
        spec,
        instance_id,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("KV admission denied for request {request}: need {needed} more blocks, {free} free")]
    AdmissionDenied {
        request: RequestId,
        needed: u64,
        free: u64,
    },
    #[error("KV contract violation: {0}")]
    Contract(String),
}

impl From<KvError> for Error {
    fn from(e: KvError) -> Self {
        Error::Contract(e.to_string())
    }
}

/// Block ledger for one instance's KV cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KvBlockPool {
    block_tokens: u32,
    capacity: u64,
    allocated: BTreeMap<RequestId, u64>,
    used: u64,
}

impl KvBlockPool {
    pub fn new(block_tokens: u32, capacity: u64) -> Self {
        assert!(block_tokens > 0, "block_tokens must be >= 1");
        KvBlockPool {
            block_tokens,
            capacity,
            allocated: BTreeMap::new(),
            used: 0,
        }
    }

    pub fn block_tokens(&self) -> u32 {
        self.block_tokens
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free_blocks(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn blocks_of(&self, request: RequestId) -> Option<u64> {
        self.allocated.get(&request).copied()
    }

    pub fn resident(&self) -> impl Iterator<Item = (RequestId, u64)> + '_ {
        self.allocated.iter().map(|(&k, &v)| (k, v))
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_tokens as u64)
    }

    /// Sizes `request`'s allocation to hold `tokens_resident` tokens.
    /// Allocations only grow; on `AdmissionDenied` the pool is unchanged.
    pub fn kv_alloc(&mut self, request: RequestId, tokens_resident: u64) -> Result<u64, KvError> {
        let want = self.blocks_for(tokens_resident);
        let have = self.allocated.get(&request).copied().unwrap_or(0);
        if want < have {
            return Err(KvError::Contract(format!(
                "request {request} would shrink from {have} to {want} blocks"
            )));
        }
        let needed = want - have;
        if needed > self.free_blocks() {
            return Err(KvError::AdmissionDenied {
                request,
                needed,
                free: self.free_blocks(),
            });
        }
        self.allocated.insert(request, want);
        self.used += needed;
        Ok(want)
    }

    /// Releases every block held by `request`, returning how many.
    pub fn kv_free(&mut self, request: RequestId) -> Result<u64, KvError> {
        let blocks = self
            .allocated
            .remove(&request)
            .ok_or_else(|| KvError::Contract(format!("request {request} holds no KV blocks")))?;
        self.used -= blocks;
        Ok(blocks)
    }

    pub fn kv_usage_pct(&self) -> f64 {
        if self.capacity == 0 {
            return 0.0;
        }
        100.0 * self.used as f64 / self.capacity as f64
    }
}
