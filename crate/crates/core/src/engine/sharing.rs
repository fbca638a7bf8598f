//! How concurrently submitted phase tasks share one GPU.
//!
//! Under [`SharingDiscipline::MpsConcurrent`] every active task progresses at
//! `1 / σ` of its solo speed, where
//!
//! ```text
//! σ = max(1, Σ c_rate_i / C, Σ m_rate_i / M)
//! c_rate_i = compute_demand_i / duration_alone_i
//! m_rate_i = mem_demand_i / duration_alone_i
//! ```
//!
//! Tasks that stress different resources therefore overlap for free while
//! tasks contending for the same resource stretch proportionally. Rates are
//! piecewise constant between events.

use serde::{Deserialize, Serialize};

use crate::engine::event::TaskId;
use crate::error::{Error, Result};
use crate::gpu::PhaseTask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SharingDiscipline {
    /// One task at a time, in submission order, run to completion.
    Exclusive,
    /// Proportional-slowdown sharing of compute and bandwidth.
    #[default]
    MpsConcurrent,
    /// Round-robin quanta over instances; a switch between distinct
    /// instances costs `switch_cost_s` of dead time. The holder runs its
    /// own tasks one at a time in submission order.
    TimeSliced {
        #[serde(default = "default_quantum")]
        quantum_s: f64,
        #[serde(default = "default_switch_cost")]
        switch_cost_s: f64,
    },
}

fn default_quantum() -> f64 {
    0.002
}

fn default_switch_cost() -> f64 {
    0.0005
}

impl SharingDiscipline {
    pub fn time_sliced_default() -> Self {
        SharingDiscipline::TimeSliced {
            quantum_s: default_quantum(),
            switch_cost_s: default_switch_cost(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SharingDiscipline::TimeSliced {
            quantum_s,
            switch_cost_s,
        } = *self
        {
            if !(quantum_s.is_finite() && quantum_s > 0.0) {
                return Err(Error::config(
                    "discipline.quantum_s",
                    format!("must be > 0, got {quantum_s}"),
                ));
            }
            if !(switch_cost_s.is_finite() && switch_cost_s >= 0.0) {
                return Err(Error::config(
                    "discipline.switch_cost_s",
                    format!("must be >= 0, got {switch_cost_s}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTask {
    pub id: TaskId,
    pub seq: u64,
    pub task: PhaseTask,
    pub started_s: f64,
    /// Fraction of the solo duration still to run, in `(0, 1]`.
    pub remaining: f64,
}

/// A quantum handed to `instance`; expires at `expires_s` unless `epoch`
/// has moved on by then.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantumGrant {
    pub instance: usize,
    pub epoch: u64,
    pub expires_s: f64,
}

#[derive(Debug, Clone, Default)]
struct Slice {
    current: Option<usize>,
    last: Option<usize>,
    switch_until: f64,
    epoch: u64,
    switches: u64,
}

/// Active-task set plus the arbitration state of one simulated GPU.
#[derive(Debug, Clone)]
pub struct SharedGpu {
    compute_capacity: f64,
    mem_bandwidth: f64,
    discipline: SharingDiscipline,
    active: Vec<ActiveTask>,
    clock: f64,
    slice: Slice,
}

impl SharedGpu {
    pub fn new(compute_capacity: f64, mem_bandwidth: f64, discipline: SharingDiscipline) -> Self {
        SharedGpu {
            compute_capacity,
            mem_bandwidth,
            discipline,
            active: Vec::new(),
            clock: 0.0,
            slice: Slice::default(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn active(&self) -> &[ActiveTask] {
        &self.active
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }

    /// Context switches performed so far (time-sliced only).
    pub fn switches(&self) -> u64 {
        self.slice.switches
    }

    pub fn submit(&mut self, id: TaskId, seq: u64, task: PhaseTask) {
        debug_assert!(self.active.last().is_none_or(|t| t.seq < seq));
        self.active.push(ActiveTask {
            id,
            seq,
            task,
            started_s: self.clock,
            remaining: 1.0,
        });
    }

    fn runnable(&self, instance: usize) -> bool {
        self.active.iter().any(|t| t.task.instance_id == instance)
    }

    /// Next instance after `after` in cyclic id order that has work;
    /// `after` itself is the last candidate.
    fn pick_after(&self, after: Option<usize>) -> Option<usize> {
        let mut ids: Vec<usize> = self.active.iter().map(|t| t.task.instance_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let first = *ids.first()?;
        Some(match after {
            None => first,
            Some(a) => ids.iter().copied().find(|&i| i > a).unwrap_or(first),
        })
    }

    fn activate(&mut self, instance: usize, quantum_s: f64, switch_cost_s: f64) -> QuantumGrant {
        let cost = match self.slice.last {
            Some(prev) if prev != instance => {
                self.slice.switches += 1;
                switch_cost_s
            }
            _ => 0.0,
        };
        self.slice.switch_until = self.clock + cost;
        self.slice.epoch += 1;
        self.slice.current = Some(instance);
        self.slice.last = Some(instance);
        QuantumGrant {
            instance,
            epoch: self.slice.epoch,
            expires_s: self.slice.switch_until + quantum_s,
        }
    }

    /// Releases an idle slice holder and hands the GPU to the next runnable
    /// instance. Only meaningful for time slicing; returns the new grant.
    pub fn arbitrate(&mut self) -> Option<QuantumGrant> {
        let SharingDiscipline::TimeSliced {
            quantum_s,
            switch_cost_s,
        } = self.discipline
        else {
            return None;
        };
        if let Some(cur) = self.slice.current {
            if self.runnable(cur) {
                return None;
            }
            self.slice.current = None;
            self.slice.epoch += 1;
        }
        let next = self.pick_after(self.slice.last)?;
        Some(self.activate(next, quantum_s, switch_cost_s))
    }

    /// Handles a quantum expiry. `None` means the grant was stale.
    pub fn on_quantum_expiry(&mut self, instance: usize, epoch: u64) -> Option<QuantumGrant> {
        let SharingDiscipline::TimeSliced {
            quantum_s,
            switch_cost_s,
        } = self.discipline
        else {
            return None;
        };
        if epoch != self.slice.epoch || self.slice.current != Some(instance) {
            return None;
        }
        match self.pick_after(Some(instance)) {
            Some(next) => Some(self.activate(next, quantum_s, switch_cost_s)),
            None => {
                self.slice.current = None;
                self.slice.epoch += 1;
                None
            }
        }
    }

    pub fn is_current_grant(&self, instance: usize, epoch: u64) -> bool {
        self.slice.current == Some(instance) && self.slice.epoch == epoch
    }

    fn sigma_over<'a>(&self, tasks: impl Iterator<Item = &'a ActiveTask>) -> f64 {
        let (mut c, mut m) = (0.0, 0.0);
        for t in tasks {
            if t.task.duration_alone_s > 0.0 {
                c += t.task.compute_rate();
                m += t.task.mem_rate();
            }
        }
        1.0_f64
            .max(c / self.compute_capacity)
            .max(m / self.mem_bandwidth)
    }

    /// Slowdown factor applied to each task, `None` for tasks not
    /// progressing right now.
    pub fn slowdowns(&self) -> Vec<Option<f64>> {
        match self.discipline {
            SharingDiscipline::MpsConcurrent => {
                let s = self.sigma_over(self.active.iter());
                vec![Some(s); self.active.len()]
            }
            SharingDiscipline::Exclusive => {
                let mut out = vec![None; self.active.len()];
                if let Some(first) = out.first_mut() {
                    *first = Some(self.sigma_over(self.active.iter().take(1)));
                }
                out
            }
            SharingDiscipline::TimeSliced { .. } => {
                let Some(cur) = self.slice.current else {
                    return vec![None; self.active.len()];
                };
                if self.clock < self.slice.switch_until {
                    return vec![None; self.active.len()];
                }
                let mut out = vec![None; self.active.len()];
                if let Some(i) = self.active.iter().position(|t| t.task.instance_id == cur) {
                    out[i] = Some(self.sigma_over(self.active[i..=i].iter()));
                }
                out
            }
        }
    }

    /// Current σ over the progressing set (1 when nothing progresses).
    pub fn sigma(&self) -> f64 {
        self.slowdowns().into_iter().flatten().next().unwrap_or(1.0)
    }

    /// Earliest time at which rates change on their own: a task completion
    /// or the end of a context-switch dead interval.
    pub fn next_boundary(&self) -> Option<f64> {
        if let SharingDiscipline::TimeSliced { .. } = self.discipline {
            if self.slice.current.is_some() && self.clock < self.slice.switch_until {
                return Some(self.slice.switch_until);
            }
        }
        self.active
            .iter()
            .zip(self.slowdowns())
            .filter_map(|(t, s)| s.map(|s| self.clock + t.remaining * t.task.duration_alone_s * s))
            .min_by(f64::total_cmp)
    }

    /// Integrates progress up to `to`. Callers never step past
    /// [`next_boundary`](Self::next_boundary), so rates are constant.
    pub fn advance(&mut self, to: f64) {
        let dt = to - self.clock;
        debug_assert!(dt >= 0.0, "clock moved backwards");
        if dt > 0.0 {
            let slow = self.slowdowns();
            for (t, s) in self.active.iter_mut().zip(slow) {
                if let Some(s) = s {
                    if t.task.duration_alone_s > 0.0 {
                        t.remaining = (t.remaining - dt / (t.task.duration_alone_s * s)).max(0.0);
                    } else {
                        t.remaining = 0.0;
                    }
                }
            }
        }
        self.clock = to;
    }

    /// Removes and returns tasks whose remaining solo time is below the
    /// rounding tolerance, in submission order.
    pub fn take_due(&mut self) -> Vec<ActiveTask> {
        let tol = 1e-12 * self.clock.max(1.0);
        let (due, keep): (Vec<_>, Vec<_>) = self
            .active
            .drain(..)
            .partition(|t| t.remaining * t.task.duration_alone_s <= tol);
        self.active = keep;
        due
    }

    /// Per-instance `(compute_pct, mem_pct)` of device capacity in use now.
    pub fn instance_utilization(&self, n_instances: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); n_instances];
        for (t, s) in self.active.iter().zip(self.slowdowns()) {
            let Some(s) = s else { continue };
            if t.task.duration_alone_s <= 0.0 {
                continue;
            }
            let slot = &mut out[t.task.instance_id];
            slot.0 += 100.0 * t.task.compute_rate() / s / self.compute_capacity;
            slot.1 += 100.0 * t.task.mem_rate() / s / self.mem_bandwidth;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpu::PhaseKind;

    fn gpu(d: SharingDiscipline) -> SharedGpu {
        SharedGpu::new(100.0, 100.0, d)
    }

    #[test]
    fn sigma_is_one_without_contention() {
        let mut g = gpu(SharingDiscipline::MpsConcurrent);
        g.submit(0, 0, PhaseTask::raw(PhaseKind::Prompt, 0, 100.0, 0.0, 1.0));
        g.submit(1, 1, PhaseTask::raw(PhaseKind::TokenStep, 1, 0.0, 100.0, 1.0));
        assert_eq!(g.sigma(), 1.0);
        assert_eq!(g.next_boundary(), Some(1.0));
    }

    #[test]
    fn sigma_counts_the_tighter_resource() {
        let mut g = gpu(SharingDiscipline::MpsConcurrent);
        g.submit(0, 0, PhaseTask::raw(PhaseKind::Prompt, 0, 80.0, 10.0, 1.0));
        g.submit(1, 1, PhaseTask::raw(PhaseKind::Prompt, 0, 70.0, 10.0, 1.0));
        assert!((g.sigma() - 1.5).abs() < 1e-15);
        let util = g.instance_utilization(1);
        assert!((util[0].0 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn exclusive_runs_in_submission_order() {
        let mut g = gpu(SharingDiscipline::Exclusive);
        g.submit(0, 0, PhaseTask::raw(PhaseKind::Prompt, 0, 10.0, 0.0, 1.0));
        g.submit(1, 1, PhaseTask::raw(PhaseKind::Prompt, 0, 10.0, 0.0, 1.0));
        assert_eq!(g.slowdowns(), vec![Some(1.0), None]);
    }

    #[test]
    fn stale_quantum_is_ignored() {
        let mut g = gpu(SharingDiscipline::TimeSliced {
            quantum_s: 0.1,
            switch_cost_s: 0.0,
        });
        g.submit(0, 0, PhaseTask::raw(PhaseKind::Prompt, 0, 10.0, 0.0, 1.0));
        let grant = g.arbitrate().unwrap();
        assert_eq!(grant.instance, 0);
        assert!(g.arbitrate().is_none());
        assert!(g.on_quantum_expiry(0, grant.epoch + 5).is_none());
        let renewed = g.on_quantum_expiry(0, grant.epoch).unwrap();
        assert_eq!(renewed.instance, 0);
        assert_eq!(g.switches(), 0);
    }
}
