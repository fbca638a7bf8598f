//! Per-request timelines and the serving metrics derived from them.
//!
//! A [`Recorder`] folds the engine's event records into a
//! [`MetricsReport`]. The same fold is used for live runs and for replaying
//! an event log, so both produce identical reports.
//!
//! Definitions:
//! * TTFT = first output token time minus arrival;
//! * E2E = finish minus arrival;
//! * TBT = `(finish - first_token) / (output_tokens - 1)`, only for requests
//!   with at least two output tokens;
//! * percentiles use nearest rank;
//! * steady-state throughput counts tokens emitted after the first 10% of
//!   requests have finished.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::event::TaskId;
use crate::engine::log::Record;
use crate::error::{Error, Result};
use crate::gpu::PhaseKind;
use crate::workload::RequestId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub instance: usize,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub prompt_start_s: f64,
    pub first_token_s: f64,
    pub finish_s: f64,
    pub token_times_s: Vec<f64>,
}

impl RequestRecord {
    pub fn ttft_s(&self) -> f64 {
        self.first_token_s - self.arrival_s
    }

    pub fn e2e_s(&self) -> f64 {
        self.finish_s - self.arrival_s
    }

    pub fn tbt_mean_s(&self) -> Option<f64> {
        (self.output_tokens >= 2)
            .then(|| (self.finish_s - self.first_token_s) / (self.output_tokens - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: TaskId,
    pub instance: usize,
    pub phase: PhaseKind,
    pub start_s: f64,
    pub end_s: f64,
    pub batch_size: usize,
    pub compute_demand: f64,
    pub mem_demand: f64,
    pub duration_alone_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvPoint {
    pub time_s: f64,
    pub blocks: u64,
    pub pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilPoint {
    pub time_s: f64,
    pub compute_pct: f64,
    pub mem_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub id: usize,
    pub kv_capacity_blocks: u64,
    pub n_requests: usize,
    /// Last finish minus first arrival over this instance's requests.
    pub batch_elapsed_s: f64,
    pub kv_series: Vec<KvPoint>,
    pub util_series: Vec<UtilPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        LatencyStats {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: nearest_rank(&v, 0.5),
            p99: nearest_rank(&v, 0.99),
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_requests: usize,
    pub total_output_tokens: u64,
    pub makespan_s: f64,
    pub e2e_s: LatencyStats,
    pub mean_ttft_s: f64,
    pub mean_tbt_s: Option<f64>,
    pub tokens_per_s: f64,
    pub requests_per_s: f64,
    pub steady_tokens_per_s: Option<f64>,
    /// Whole-device utilization, summed over instances.
    pub utilization: Vec<UtilPoint>,
    pub instances: Vec<InstanceReport>,
    pub requests: Vec<RequestRecord>,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Debug, Default, Clone)]
struct PartialRequest {
    id: RequestId,
    instance: usize,
    arrival_s: f64,
    input_tokens: u32,
    output_tokens: u32,
    prompt_start_s: Option<f64>,
    token_times_s: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PartialTask {
    rec: TaskRecord,
    batch: Vec<usize>,
    done: bool,
}

/// Incremental builder for a [`MetricsReport`].
#[derive(Debug, Default)]
pub struct Recorder {
    kv_capacity: Vec<u64>,
    prompt_emits_first_token: bool,
    started: bool,
    last_t: f64,
    requests: Vec<PartialRequest>,
    by_id: HashMap<RequestId, usize>,
    tasks: Vec<PartialTask>,
    task_index: HashMap<TaskId, usize>,
    kv: Vec<Vec<KvPoint>>,
    util: Vec<Vec<UtilPoint>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one record in. Records must arrive in non-decreasing time.
    pub fn record_event(&mut self, rec: &Record) -> Result<()> {
        let t = rec.time();
        if t < self.last_t {
            return Err(Error::contract(format!(
                "event at {t} s arrived after {} s",
                self.last_t
            )));
        }
        self.last_t = t;
        if !self.started && !matches!(rec, Record::Begin { .. }) {
            return Err(Error::contract("event log must start with a begin record"));
        }
        match rec {
            Record::Begin {
                kv_capacity,
                prompt_emits_first_token,
                ..
            } => {
                if self.started {
                    return Err(Error::contract("duplicate begin record"));
                }
                self.started = true;
                self.kv_capacity = kv_capacity.clone();
                self.prompt_emits_first_token = *prompt_emits_first_token;
                self.kv = vec![Vec::new(); kv_capacity.len()];
                self.util = vec![Vec::new(); kv_capacity.len()];
            }
            Record::Arrival {
                t,
                id,
                instance,
                input_tokens,
                output_tokens,
            } => {
                self.check_instance(*instance)?;
                if self.by_id.insert(*id, self.requests.len()).is_some() {
                    return Err(Error::contract(format!("request {id} arrived twice")));
                }
                self.requests.push(PartialRequest {
                    id: *id,
                    instance: *instance,
                    arrival_s: *t,
                    input_tokens: *input_tokens,
                    output_tokens: *output_tokens,
                    ..Default::default()
                });
            }
            Record::TaskStart {
                t,
                task,
                instance,
                phase,
                batch,
                compute_demand,
                mem_demand,
                duration_alone_s,
            } => {
                self.check_instance(*instance)?;
                let mut idxs = Vec::with_capacity(batch.len());
                for id in batch {
                    let idx = *self
                        .by_id
                        .get(id)
                        .ok_or_else(|| Error::contract(format!("task {task} references unknown request {id}")))?;
                    if *phase == PhaseKind::Prompt {
                        self.requests[idx].prompt_start_s = Some(*t);
                    }
                    idxs.push(idx);
                }
                self.task_index.insert(*task, self.tasks.len());
                self.tasks.push(PartialTask {
                    rec: TaskRecord {
                        id: *task,
                        instance: *instance,
                        phase: *phase,
                        start_s: *t,
                        end_s: f64::NAN,
                        batch_size: batch.len(),
                        compute_demand: *compute_demand,
                        mem_demand: *mem_demand,
                        duration_alone_s: *duration_alone_s,
                    },
                    batch: idxs,
                    done: false,
                });
            }
            Record::TaskComplete { t, task } => {
                let ti = *self
                    .task_index
                    .get(task)
                    .ok_or_else(|| Error::contract(format!("completion of unknown task {task}")))?;
                let pt = &mut self.tasks[ti];
                if pt.done {
                    return Err(Error::contract(format!("task {task} completed twice")));
                }
                pt.done = true;
                pt.rec.end_s = *t;
                let emits = match pt.rec.phase {
                    PhaseKind::TokenStep => true,
                    PhaseKind::Prompt => self.prompt_emits_first_token,
                };
                if emits {
                    for &idx in &pt.batch {
                        self.requests[idx].token_times_s.push(*t);
                    }
                }
            }
            Record::QuantumExpiry { instance, .. } => self.check_instance(*instance)?,
            Record::Kv { t, instance, blocks } => {
                self.check_instance(*instance)?;
                let cap = self.kv_capacity[*instance];
                let pct = if cap == 0 { 0.0 } else { 100.0 * *blocks as f64 / cap as f64 };
                self.kv[*instance].push(KvPoint {
                    time_s: *t,
                    blocks: *blocks,
                    pct,
                });
            }
            Record::Util {
                t,
                instance,
                compute_pct,
                mem_pct,
            } => {
                self.check_instance(*instance)?;
                self.util[*instance].push(UtilPoint {
                    time_s: *t,
                    compute_pct: *compute_pct,
                    mem_pct: *mem_pct,
                });
            }
        }
        Ok(())
    }

    fn check_instance(&self, instance: usize) -> Result<()> {
        if instance >= self.kv_capacity.len() {
            return Err(Error::contract(format!("unknown instance {instance}")));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<MetricsReport> {
        let mut requests = Vec::with_capacity(self.requests.len());
        for p in self.requests {
            if p.token_times_s.len() != p.output_tokens as usize {
                return Err(Error::contract(format!(
                    "request {} produced {} of {} tokens",
                    p.id,
                    p.token_times_s.len(),
                    p.output_tokens
                )));
            }
            let prompt_start_s = p
                .prompt_start_s
                .ok_or_else(|| Error::contract(format!("request {} never prompted", p.id)))?;
            requests.push(RequestRecord {
                id: p.id,
                instance: p.instance,
                arrival_s: p.arrival_s,
                input_tokens: p.input_tokens,
                output_tokens: p.output_tokens,
                prompt_start_s,
                first_token_s: p.token_times_s[0],
                finish_s: *p.token_times_s.last().unwrap(),
                token_times_s: p.token_times_s,
            });
        }
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for pt in self.tasks {
            if !pt.done {
                return Err(Error::contract(format!("task {} never completed", pt.rec.id)));
            }
            tasks.push(pt.rec);
        }

        let n = requests.len();
        let total_output_tokens: u64 = requests.iter().map(|r| r.output_tokens as u64).sum();
        let makespan_s = if n == 0 {
            0.0
        } else {
            let first = requests.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
            let last = requests.iter().map(|r| r.finish_s).fold(f64::NEG_INFINITY, f64::max);
            last - first
        };
        let e2e: Vec<f64> = requests.iter().map(RequestRecord::e2e_s).collect();
        let mean_ttft_s = if n == 0 {
            0.0
        } else {
            requests.iter().map(RequestRecord::ttft_s).sum::<f64>() / n as f64
        };
        let tbts: Vec<f64> = requests.iter().filter_map(RequestRecord::tbt_mean_s).collect();
        let mean_tbt_s = (!tbts.is_empty()).then(|| tbts.iter().sum::<f64>() / tbts.len() as f64);
        let (tokens_per_s, requests_per_s) = if makespan_s > 0.0 {
            (total_output_tokens as f64 / makespan_s, n as f64 / makespan_s)
        } else {
            (0.0, 0.0)
        };

        let instances = (0..self.kv_capacity.len())
            .map(|i| {
                let mine: Vec<&RequestRecord> = requests.iter().filter(|r| r.instance == i).collect();
                let batch_elapsed_s = if mine.is_empty() {
                    0.0
                } else {
                    let a = mine.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
                    let f = mine.iter().map(|r| r.finish_s).fold(f64::NEG_INFINITY, f64::max);
                    f - a
                };
                InstanceReport {
                    id: i,
                    kv_capacity_blocks: self.kv_capacity[i],
                    n_requests: mine.len(),
                    batch_elapsed_s,
                    kv_series: self.kv[i].clone(),
                    util_series: self.util[i].clone(),
                }
            })
            .collect::<Vec<_>>();

        Ok(MetricsReport {
            n_requests: n,
            total_output_tokens,
            makespan_s,
            e2e_s: LatencyStats::from_samples(&e2e),
            mean_ttft_s,
            mean_tbt_s,
            tokens_per_s,
            requests_per_s,
            steady_tokens_per_s: steady_state_throughput(&requests),
            utilization: merge_utilization(&instances),
            instances,
            requests,
            tasks,
        })
    }
}

/// Rebuilds a report from a record stream.
pub fn replay(records: &[Record]) -> Result<MetricsReport> {
    let mut rec = Recorder::new();
    for r in records {
        rec.record_event(r)?;
    }
    rec.finish()
}

fn steady_state_throughput(requests: &[RequestRecord]) -> Option<f64> {
    if requests.is_empty() {
        return None;
    }
    let mut finishes: Vec<f64> = requests.iter().map(|r| r.finish_s).collect();
    finishes.sort_by(f64::total_cmp);
    let k = ((0.1 * requests.len() as f64).ceil() as usize).max(1);
    let start = finishes[k - 1];
    let end = *finishes.last().unwrap();
    if end <= start {
        return None;
    }
    let tokens = requests
        .iter()
        .flat_map(|r| r.token_times_s.iter())
        .filter(|&&t| t > start)
        .count();
    Some(tokens as f64 / (end - start))
}

/// Sum of per-instance step functions, one point per distinct change time.
fn merge_utilization(instances: &[InstanceReport]) -> Vec<UtilPoint> {
    let mut points: Vec<(f64, usize, f64, f64)> = instances
        .iter()
        .flat_map(|i| {
            i.util_series
                .iter()
                .map(move |p| (p.time_s, i.id, p.compute_pct, p.mem_pct))
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut current = vec![(0.0, 0.0); instances.len()];
    let mut out: Vec<UtilPoint> = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let t = points[i].0;
        while i < points.len() && points[i].0 == t {
            current[points[i].1] = (points[i].2, points[i].3);
            i += 1;
        }
        let (c, m) = current
            .iter()
            .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        let p = UtilPoint {
            time_s: t,
            compute_pct: c,
            mem_pct: m,
        };
        match out.last() {
            Some(last) if last.compute_pct == c && last.mem_pct == m => {}
            _ => out.push(p),
        }
    }
    out
}

/// Aggregates restricted to the time when a given phase was active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseAggregates {
    /// False when no task of the phase ever ran; the other fields are zero.
    pub present: bool,
    /// Length of the union of the phase's task intervals.
    pub elapsed_s: f64,
    /// Sum of the phase's task spans, counting overlaps repeatedly.
    pub span_sum_s: f64,
    pub mean_kv_pct: f64,
    pub mean_compute_pct: f64,
    pub mean_mem_pct: f64,
}

pub fn phase_windowed(report: &MetricsReport, phase: PhaseKind) -> PhaseAggregates {
    let mut spans: Vec<(f64, f64)> = report
        .tasks
        .iter()
        .filter(|t| t.phase == phase)
        .map(|t| (t.start_s, t.end_s))
        .collect();
    if spans.is_empty() {
        return PhaseAggregates {
            present: false,
            elapsed_s: 0.0,
            span_sum_s: 0.0,
            mean_kv_pct: 0.0,
            mean_compute_pct: 0.0,
            mean_mem_pct: 0.0,
        };
    }
    let span_sum_s = spans.iter().map(|(a, b)| b - a).sum();
    let windows = merge_intervals(&mut spans);
    let elapsed_s: f64 = windows.iter().map(|(a, b)| b - a).sum();

    let kv = kv_total_pct_series(report);
    let compute: Vec<(f64, f64)> = report.utilization.iter().map(|p| (p.time_s, p.compute_pct)).collect();
    let mem: Vec<(f64, f64)> = report.utilization.iter().map(|p| (p.time_s, p.mem_pct)).collect();
    let mean = |series: &[(f64, f64)]| {
        if elapsed_s > 0.0 {
            integrate_step(series, &windows) / elapsed_s
        } else {
            value_at(series, windows[0].0)
        }
    };
    PhaseAggregates {
        present: true,
        elapsed_s,
        span_sum_s,
        mean_kv_pct: mean(&kv),
        mean_compute_pct: mean(&compute),
        mean_mem_pct: mean(&mem),
    }
}

/// Device-wide KV usage: blocks held over blocks available, as a step series.
pub fn kv_total_pct_series(report: &MetricsReport) -> Vec<(f64, f64)> {
    let cap: u64 = report.instances.iter().map(|i| i.kv_capacity_blocks).sum();
    let mut points: Vec<(f64, usize, u64)> = report
        .instances
        .iter()
        .flat_map(|i| i.kv_series.iter().map(move |p| (p.time_s, i.id, p.blocks)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut held = vec![0u64; report.instances.len()];
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let t = points[i].0;
        while i < points.len() && points[i].0 == t {
            held[points[i].1] = points[i].2;
            i += 1;
        }
        let pct = if cap == 0 {
            0.0
        } else {
            100.0 * held.iter().sum::<u64>() as f64 / cap as f64
        };
        out.push((t, pct));
    }
    out
}

/// Sorts and merges overlapping or touching intervals.
pub fn merge_intervals(spans: &mut [(f64, f64)]) -> Vec<(f64, f64)> {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for &(a, b) in spans.iter() {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Value of a right-continuous step series at `t`; zero before the first point.
pub fn value_at(series: &[(f64, f64)], t: f64) -> f64 {
    let idx = series.partition_point(|p| p.0 <= t);
    if idx == 0 {
        0.0
    } else {
        series[idx - 1].1
    }
}

/// Integral of a step series over disjoint, sorted windows.
pub fn integrate_step(series: &[(f64, f64)], windows: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(a, b) in windows {
        let mut t = a;
        let mut idx = series.partition_point(|p| p.0 <= a);
        let mut v = if idx == 0 { 0.0 } else { series[idx - 1].1 };
        while idx < series.len() && series[idx].0 < b {
            total += v * (series[idx].0 - t);
            t = series[idx].0;
            v = series[idx].1;
            idx += 1;
        }
        total += v * (b - t);
    }
    total
}
